# 应用包初始化文件
