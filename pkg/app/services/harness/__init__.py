"""离线评估与报告"""
