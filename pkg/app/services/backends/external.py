"""外部进程后端与线协议

报文格式：4 字节大端长度前缀 + UTF-8 编码的规范化 JSON
（键排序、无多余空白、不转义非 ASCII）。每个连接同一时间只有一个请求在途。

    握手   {"type": "hello", "version": 1, "role": ..., "taxonomy": [...]}
    请求   {"type": "request", "role": ..., "frame_index": N, "image_b64": ...}
           或以 "image_path" 代替 "image_b64"
    响应   {"type": "response", "frame_index": N, "predictions": [...]}
    错误   {"type": "error", "message": ...}

识别后端的 predictions 为 [{"confidence": c}]；
检测后端的 predictions 为检测列表 [{"bbox", "kind", "class_id", "confidence"}]。
端点描述：
    external:unix:<path>
    external:tcp:<host>:<port>
    external:exec:<command line>
"""

import base64
import json
import shlex
import socket
import struct
import subprocess
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from typing import Any, BinaryIO, Callable, Dict, List, Optional, Sequence

from app.services.backends.base import BackendRole, Detector, LatencyClass, Recognizer
from app.services.hoi.cascade import ContactPrediction, detection_from_dict
from app.services.hoi.geometry import Detection
from app.utils.exceptions import BackendError, BackendTimeoutError, ConfigError, HandshakeError, ProtocolError
from app.utils.logger import Logger

logger = Logger("hoi-backend")

PROTOCOL_VERSION = 1
HEADER = struct.Struct(">I")
MAX_MESSAGE_BYTES = 64 * 1024 * 1024
MESSAGE_TYPES = ("hello", "request", "response", "error")


def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def encode_message(obj: Dict[str, Any]) -> bytes:
    payload = canonical_json(obj)
    if len(payload) > MAX_MESSAGE_BYTES:
        raise ProtocolError("报文过大", size=len(payload))
    return HEADER.pack(len(payload)) + payload


def _parse_payload(payload: bytes) -> Dict[str, Any]:
    try:
        obj = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ProtocolError(f"报文不是合法的 JSON: {e}") from e
    if not isinstance(obj, dict) or obj.get("type") not in MESSAGE_TYPES:
        raise ProtocolError("报文缺少合法的 type 字段")
    return obj


def decode_message(data: bytes) -> Dict[str, Any]:
    """解码恰好一条完整报文"""
    if len(data) < HEADER.size:
        raise ProtocolError("报文头不完整", size=len(data))
    (size,) = HEADER.unpack_from(data)
    if size > MAX_MESSAGE_BYTES:
        raise ProtocolError("报文过大", size=size)
    if len(data) - HEADER.size != size:
        raise ProtocolError("报文长度与前缀不一致", declared=size, actual=len(data) - HEADER.size)
    return _parse_payload(data[HEADER.size:])


def _read_exact(stream: BinaryIO, size: int) -> bytes:
    data = b""
    while len(data) < size:
        chunk = stream.read(size - len(data))
        if not chunk:
            raise ProtocolError("连接已关闭", expected=size, received=len(data))
        data += chunk
    return data


def read_message(stream: BinaryIO) -> Dict[str, Any]:
    (size,) = HEADER.unpack(_read_exact(stream, HEADER.size))
    if size > MAX_MESSAGE_BYTES:
        raise ProtocolError("报文过大", size=size)
    return _parse_payload(_read_exact(stream, size))


def write_message(stream: BinaryIO, obj: Dict[str, Any]):
    stream.write(encode_message(obj))
    stream.flush()


class WireConnection:
    """一条锁步连接

    读操作放在单独线程里执行，以便对套接字和管道统一施加超时；
    一旦超时，连接状态不可再信任，后续调用直接报错。

    关闭分两步：interrupt 先让阻塞中的读操作返回（关闭套接字读写或结束子进程），
    读线程退出后再由 closer 释放流对象。读线程持有缓冲流的锁，顺序不能颠倒。
    """

    def __init__(
        self,
        reader: BinaryIO,
        writer: BinaryIO,
        timeout: float = 5.0,
        closer: Optional[Callable[[], None]] = None,
        name: str = "external",
        interrupt: Optional[Callable[[bool], None]] = None,
    ):
        self.reader = reader
        self.writer = writer
        self.timeout = timeout
        self.name = name
        self._closer = closer
        self._interrupt = interrupt
        self._closed = False
        self._executor = ThreadPoolExecutor(max_workers=1, thread_name_prefix="wire-reader")
        self.broken = False

    def exchange(self, message: Dict[str, Any], frame_index: Optional[int] = None) -> Dict[str, Any]:
        if self.broken:
            raise BackendError("连接已失效", frame_index=frame_index, endpoint=self.name)
        try:
            write_message(self.writer, message)
        except OSError as e:
            self.broken = True
            raise BackendError(f"发送失败: {e}", frame_index=frame_index, endpoint=self.name) from e
        future = self._executor.submit(read_message, self.reader)
        try:
            return future.result(timeout=self.timeout)
        except FutureTimeout as e:
            self.broken = True
            raise BackendTimeoutError(
                "外部后端响应超时", frame_index=frame_index, endpoint=self.name, timeout_s=self.timeout
            ) from e
        except ProtocolError as e:
            self.broken = True
            if e.frame_index is None:
                e.frame_index = frame_index
                e.context["frame_index"] = frame_index
            raise
        except OSError as e:
            self.broken = True
            raise BackendError(f"接收失败: {e}", frame_index=frame_index, endpoint=self.name) from e

    def close(self):
        if self._closed:
            return
        self._closed = True
        if self._interrupt is not None:
            try:
                self._interrupt(self.broken)
            except OSError as e:
                logger.warning("中断外部后端连接失败", {"endpoint": self.name, "error": str(e)})
        # 连接已中断，读线程很快返回
        self._executor.shutdown(wait=True)
        if self._closer is not None:
            try:
                self._closer()
            except OSError as e:
                logger.warning("关闭外部后端连接失败", {"endpoint": self.name, "error": str(e)})


def connect(descriptor: str, timeout: float = 5.0) -> WireConnection:
    """按端点描述建立连接"""
    prefix = "external:"
    if not descriptor.startswith(prefix):
        raise ConfigError("不是外部后端描述", descriptor=descriptor)
    transport, _, target = descriptor[len(prefix):].partition(":")
    try:
        if transport == "unix":
            sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
            sock.settimeout(timeout)
            sock.connect(target)
            return _socket_connection(sock, timeout, descriptor)
        if transport == "tcp":
            host, _, port = target.rpartition(":")
            if not host or not port.isdigit():
                raise ConfigError("tcp 端点格式应为 host:port", descriptor=descriptor)
            sock = socket.create_connection((host, int(port)), timeout=timeout)
            return _socket_connection(sock, timeout, descriptor)
        if transport == "exec":
            args = shlex.split(target)
            if not args:
                raise ConfigError("exec 端点缺少命令", descriptor=descriptor)
            proc = subprocess.Popen(args, stdin=subprocess.PIPE, stdout=subprocess.PIPE)

            def _stop(broken: bool):
                # 连接失效时子进程可能仍在阻塞输出，直接结束
                if broken:
                    proc.kill()
                try:
                    proc.stdin.close()
                except OSError:
                    pass
                try:
                    proc.wait(timeout=timeout)
                except subprocess.TimeoutExpired:
                    proc.kill()
                    proc.wait()

            return WireConnection(proc.stdout, proc.stdin, timeout, proc.stdout.close, descriptor, interrupt=_stop)
    except OSError as e:
        raise BackendError(f"无法连接外部后端: {e}", endpoint=descriptor) from e
    raise ConfigError("未知的外部后端传输方式", descriptor=descriptor, transport=transport)


def _socket_connection(sock: socket.socket, timeout: float, name: str) -> WireConnection:
    # 超时由 WireConnection 控制，套接字本身保持阻塞
    sock.settimeout(None)
    stream = sock.makefile("rwb")

    def _interrupt(broken: bool):
        try:
            sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            # 对端已关闭
            pass

    def _close():
        try:
            stream.close()
        finally:
            sock.close()

    return WireConnection(stream, stream, timeout, _close, name, interrupt=_interrupt)


def _handshake(conn: WireConnection, role: BackendRole, taxonomy: Sequence[str]):
    hello = {"type": "hello", "version": PROTOCOL_VERSION, "role": role.value, "taxonomy": list(taxonomy)}
    reply = conn.exchange(hello)
    if reply.get("type") == "error":
        raise HandshakeError(f"外部后端拒绝握手: {reply.get('message')}", endpoint=conn.name)
    if reply.get("type") != "hello":
        raise HandshakeError("握手响应类型错误", endpoint=conn.name, type=reply.get("type"))
    if reply.get("version") != PROTOCOL_VERSION:
        raise HandshakeError("协议版本不一致", endpoint=conn.name, remote=reply.get("version"))
    if reply.get("role") != role.value:
        raise HandshakeError("后端角色不一致", endpoint=conn.name, remote=reply.get("role"))
    if list(reply.get("taxonomy") or []) != list(taxonomy):
        raise HandshakeError("类别表不一致", endpoint=conn.name)
    logger.info("外部后端握手成功", {"endpoint": conn.name, "role": role.value})


def build_request(role: BackendRole, frame_index: int, image: bytes = b"", image_path: Optional[str] = None) -> Dict:
    request: Dict[str, Any] = {"type": "request", "role": role.value, "frame_index": frame_index}
    if image_path is not None:
        request["image_path"] = image_path
    else:
        request["image_b64"] = base64.b64encode(image).decode("ascii")
    return request


class _ExternalMixin:
    conn: WireConnection

    def _request(self, role: BackendRole, frame_index: int, image: bytes) -> List[Any]:
        response = self.conn.exchange(build_request(role, frame_index, image), frame_index)
        if response.get("type") == "error":
            raise BackendError(f"外部后端返回错误: {response.get('message')}", frame_index=frame_index)
        if response.get("type") != "response" or response.get("frame_index") != frame_index:
            self.conn.broken = True
            raise ProtocolError(
                "响应与请求不匹配", frame_index=frame_index, returned=response.get("frame_index")
            )
        predictions = response.get("predictions")
        if not isinstance(predictions, list):
            raise ProtocolError("响应缺少 predictions 列表", frame_index=frame_index)
        return predictions


class ExternalRecognizer(_ExternalMixin, Recognizer):
    latency_class = LatencyClass.REMOTE

    def __init__(self, conn: WireConnection, taxonomy: Sequence[str]):
        super().__init__()
        self.conn = conn
        _handshake(conn, BackendRole.RECOGNIZER, taxonomy)

    def _predict(self, frame_index: int, image: bytes) -> ContactPrediction:
        predictions = self._request(BackendRole.RECOGNIZER, frame_index, image)
        try:
            (item,) = predictions
            return ContactPrediction.from_confidence(frame_index, float(item["confidence"]))
        except (ValueError, TypeError, KeyError) as e:
            raise ProtocolError(f"识别响应格式错误: {e}", frame_index=frame_index) from e

    def close(self):
        self.conn.close()


class ExternalDetector(_ExternalMixin, Detector):
    latency_class = LatencyClass.REMOTE

    def __init__(self, conn: WireConnection, taxonomy: Sequence[str]):
        super().__init__()
        self.conn = conn
        self.n_classes = len(taxonomy)
        _handshake(conn, BackendRole.DETECTOR, taxonomy)

    def _detect(self, frame_index: int, image: bytes) -> List[Detection]:
        predictions = self._request(BackendRole.DETECTOR, frame_index, image)
        try:
            dets = [detection_from_dict(d) for d in predictions]
        except (ValueError, TypeError, KeyError) as e:
            raise ProtocolError(f"检测响应格式错误: {e}", frame_index=frame_index) from e
        for det in dets:
            if det.class_id >= self.n_classes:
                raise ProtocolError("检测类别超出类别表", frame_index=frame_index, class_id=det.class_id)
        return dets

    def close(self):
        self.conn.close()


def external_backend(
    descriptor: str,
    role: BackendRole,
    taxonomy: Sequence[str],
    timeout: float = 5.0,
    conn: Optional[WireConnection] = None,
):
    """连接外部进程并完成握手，返回识别或检测后端"""
    conn = conn or connect(descriptor, timeout)
    try:
        if role == BackendRole.RECOGNIZER:
            return ExternalRecognizer(conn, taxonomy)
        return ExternalDetector(conn, taxonomy)
    except Exception:
        conn.close()
        raise
