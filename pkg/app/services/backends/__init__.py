"""推理后端：理想识别、脚本后端与外部进程"""
