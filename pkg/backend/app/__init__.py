"""
RDSim backend application
模拟引擎、运行工作器与命令行工具
"""
