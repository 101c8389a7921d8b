# app/__init__.py
"""
PPD：多轮对话 PD 分离路由
- services/simulator.py      离散事件仿真
- services/routing_service.py 决策表与逐请求决策
- services/sweep_service.py   实验网格
- services/gateway_service.py 路由网关
命令行入口见 app/cli.py（python -m app）
"""

__version__ = "1.0.0"
