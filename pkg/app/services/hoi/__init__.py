"""HOI 核心：几何、关联、级联与评估指标"""
