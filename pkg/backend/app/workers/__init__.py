"""
后台工作进程模块（模拟运行）
"""
