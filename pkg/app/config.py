# app/config.py
"""
配置管理模块
作用：统一管理应用配置，根据环境自动切换
开发逻辑：创建单例配置类，避免重复读取环境变量
注意：环境变量只覆盖路径和网关监听/定时参数；影响仿真结果的参数
一律来自带版本的配置文件（标定/负载/实验计划）或命令行参数
"""

import os
from pathlib import Path
from dotenv import load_dotenv

# 加载.env文件
load_dotenv()

# 包内自带的数据文件目录
DATA_DIR = Path(__file__).parent / "data"


class Settings:
    """配置类，使用单例模式确保配置一致"""

    # 应用配置
    ENV: str = "development"
    DEBUG: bool = True

    # ============ 路径配置 ============
    OUTPUT_DIR: str = "results"
    CALIBRATION_PATH: str = str(DATA_DIR / "calibration_default.yaml")
    THROTTLED_CALIBRATION_PATH: str = str(DATA_DIR / "calibration_throttled.yaml")
    PLAN_PATH: str = str(DATA_DIR / "plan_default.yaml")
    TABLE_PATH: str = "results/decision_table.json"

    # ============ 网关配置 ============
    GATEWAY_HOST: str = "0.0.0.0"
    GATEWAY_PORT: int = 7600
    SESSION_TTL_S: float = 3600.0   # 会话空闲 60 分钟后淘汰
    BACKEND_TTL_S: float = 30.0     # 30 秒无心跳移除后端
    PRUNE_INTERVAL_S: float = 5.0   # 后台清理周期

    def __init__(self):
        """初始化配置，从环境变量覆盖默认值"""
        self._load_from_env()

    def _load_from_env(self):
        """从环境变量加载配置"""
        self.ENV = os.getenv("ENV", self.ENV)

        if self.ENV == "production":
            self.DEBUG = os.getenv("DEBUG", "false").lower() == "true"
        else:
            self.DEBUG = os.getenv("DEBUG", "true").lower() == "true"

        # 路径
        self.OUTPUT_DIR = os.getenv("PPD_OUTPUT_DIR", self.OUTPUT_DIR)
        self.CALIBRATION_PATH = os.getenv("PPD_CALIBRATION_PATH", self.CALIBRATION_PATH)
        self.PLAN_PATH = os.getenv("PPD_PLAN_PATH", self.PLAN_PATH)
        self.TABLE_PATH = os.getenv(
            "PPD_TABLE_PATH",
            os.path.join(self.OUTPUT_DIR, "decision_table.json")
        )

        # 网关
        self.GATEWAY_HOST = os.getenv("PPD_GATEWAY_HOST", self.GATEWAY_HOST)

        port_str = os.getenv("PPD_GATEWAY_PORT")
        if port_str is not None:
            self.GATEWAY_PORT = int(port_str)

        ttl_str = os.getenv("PPD_SESSION_TTL_S")
        if ttl_str is not None:
            self.SESSION_TTL_S = float(ttl_str)

        backend_ttl_str = os.getenv("PPD_BACKEND_TTL_S")
        if backend_ttl_str is not None:
            self.BACKEND_TTL_S = float(backend_ttl_str)

        prune_str = os.getenv("PPD_PRUNE_INTERVAL_S")
        if prune_str is not None:
            self.PRUNE_INTERVAL_S = float(prune_str)

    @property
    def output_path(self) -> str:
        """获取输出目录（不存在则创建）"""
        if not os.path.exists(self.OUTPUT_DIR):
            os.makedirs(self.OUTPUT_DIR, exist_ok=True)
        return os.path.abspath(self.OUTPUT_DIR)

    def __str__(self) -> str:
        return (
            f"Settings(ENV={self.ENV}, DEBUG={self.DEBUG}, "
            f"OUTPUT_DIR={self.OUTPUT_DIR}, CALIBRATION_PATH={self.CALIBRATION_PATH}, "
            f"TABLE_PATH={self.TABLE_PATH}, GATEWAY={self.GATEWAY_HOST}:{self.GATEWAY_PORT}, "
            f"SESSION_TTL_S={self.SESSION_TTL_S}, BACKEND_TTL_S={self.BACKEND_TTL_S})"
        )


# 创建全局配置实例
settings = Settings()
