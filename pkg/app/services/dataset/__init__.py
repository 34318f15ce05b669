"""语料：标注格式、加载、回放与合成"""
