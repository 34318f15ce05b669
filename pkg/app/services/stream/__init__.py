"""流式服务：接收、模型工作线程与可视化旁路"""
