"""
CLI 小工具模块（`python -m app.tools.rdsim ...`）
"""
