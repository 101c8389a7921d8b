# tests/conftest.py
"""
公共测试夹具
"""

import pytest

from app.config import settings
from app.schemas.calibration import CalibrationTable
from app.services.cost_model import load_calibration


@pytest.fixture(scope="session")
def calib() -> CalibrationTable:
    """默认标定表"""
    return load_calibration(settings.CALIBRATION_PATH)


@pytest.fixture(scope="session")
def throttled_calib() -> CalibrationTable:
    """限速链路标定表"""
    return load_calibration(settings.THROTTLED_CALIBRATION_PATH)


def linear_calib(calib: CalibrationTable, **coeffs) -> CalibrationTable:
    """在默认标定表基础上替换系数（其他部分不变）"""
    update = {}
    for section in ("full_prefill_coeffs", "append_prefill_coeffs", "decode_coeffs"):
        fields = coeffs.get(section)
        if fields:
            update[section] = getattr(calib, section).model_copy(update=fields)
    for name in ("kv_bytes_per_token", "link_bandwidth"):
        if name in coeffs:
            update[name] = coeffs[name]
    return calib.model_copy(update=update)
