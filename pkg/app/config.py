from typing import List, Optional

from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    """应用程序配置类

    管理HOI实时检测服务的所有配置项，包括服务基础设置、级联触发参数、
    流式队列容量、推理后端、评估指标以及日志。
    继承自pydantic_settings.BaseSettings，支持从环境变量和.env文件加载配置。
    """

    # 基础配置
    APP_NAME: str = "hoi-stream"  # 应用程序名称
    APP_HOST: str = "0.0.0.0"  # 应用主机
    APP_PORT: int = 8000  # 应用端口
    API_V1_STR: str = ""  # API前缀，默认挂载在根路径
    DEBUG: bool = False  # 调试模式开关

    # 语料配置
    CORPUS_DIR: Optional[str] = None  # 语料目录（oracle/scripted 后端需要）

    # 级联配置
    RECOGNIZER_THRESHOLD: float = 0.5  # 接触识别置信度阈值
    TRIGGER_WINDOW: int = 60  # 触发窗口帧数，至少为 1
    TRIGGER_MODE: str = "window"  # window | current | baseline
    IOU_THRESHOLD: float = 0.01  # 活动物体关联 IoU 阈值
    MAX_HANDS: int = 2  # 保留的手数量
    DETECTOR_CONF_THRESHOLD: float = 0.0  # 检测置信度过滤阈值

    # 推理后端配置
    RECOGNIZER: str = "oracle"  # oracle | scripted[:path] | external:...
    DETECTOR: str = "scripted"  # scripted[:path] | external:...
    BACKEND_TIMEOUT_S: float = 5.0  # 外部后端超时
    ARTIFICIAL_DELAY_MS: float = 0.0  # 人工推理延迟（吞吐测试用）
    SEED: int = 0  # 全局随机种子
    BOX_JITTER: float = 0.0  # 检测框抖动（像素σ）
    CONF_JITTER: float = 0.0  # 置信度抖动
    DROP_PROB: float = 0.0  # 检测丢失概率

    # 流式服务配置
    MAX_BATCH_FRAMES: int = 60  # 单批最大帧数
    WORKER_GROUP_SIZE: int = 30  # 模型工作线程分组大小
    WORKER_LINGER_MS: float = 100.0  # 不满一组时的等待时间
    INGEST_QUEUE_SIZE: int = 4  # 接收队列容量（批）
    MODEL_QUEUE_SIZE: int = 120  # 模型队列容量（帧）
    VIS_QUEUE_SIZE: int = 30  # 可视化队列容量（帧）
    TAP_DIR: Optional[str] = None  # 可视化输出目录，None 表示空输出
    SESSION_IDLE_S: float = 0.0  # 会话空闲超时（秒），0 表示不过期

    # 评估配置
    HOI_BOX_IOU: float = 0.5  # HOI AP 框匹配 IoU
    PAP_THRESHOLDS_S: List[float] = [float(s) for s in range(1, 11)]  # p-AP 时间阈值（秒）

    # 日志配置
    LOG_LEVEL: str = "INFO"  # 日志级别
    LOG_FORMAT: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"  # 日志格式
    LOG_DIR: str = "logs"  # 日志文件目录
    LOG_FILE_PREFIX: str = "hoi"  # 日志文件名前缀
    LOG_FILE_MAX_BYTES: int = 10 * 1024 * 1024  # 单个日志文件最大大小
    LOG_FILE_BACKUP_COUNT: int = 5  # 日志文件备份数量

    class Config:
        """配置类设置

        case_sensitive: 区分大小写
        env_file: 环境变量文件路径
        """

        case_sensitive = True
        env_file = ".env"

    def association_config(self):
        """转换为关联模块配置"""
        from app.services.hoi.association import AssociationConfig

        return AssociationConfig(iou_threshold=self.IOU_THRESHOLD, max_hands=self.MAX_HANDS)

    def cascade_config(self):
        """转换为级联模块配置"""
        from app.services.hoi.cascade import CascadeConfig, TriggerMode

        return CascadeConfig(
            window_frames=self.TRIGGER_WINDOW,
            recognizer_threshold=self.RECOGNIZER_THRESHOLD,
            mode=TriggerMode(self.TRIGGER_MODE),
            association=self.association_config(),
            detector_conf_threshold=self.DETECTOR_CONF_THRESHOLD,
        )

    def queue_config(self):
        """转换为流式队列配置"""
        from app.services.stream.pipeline import QueueConfig

        return QueueConfig(
            max_batch_frames=self.MAX_BATCH_FRAMES,
            group_size=self.WORKER_GROUP_SIZE,
            linger_s=self.WORKER_LINGER_MS / 1000.0,
            ingest_capacity=self.INGEST_QUEUE_SIZE,
            model_capacity=self.MODEL_QUEUE_SIZE,
            vis_capacity=self.VIS_QUEUE_SIZE,
            session_idle_s=self.SESSION_IDLE_S,
        )


settings = Settings()  # 创建全局配置实例
