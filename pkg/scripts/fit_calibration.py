# scripts/fit_calibration.py
"""
从实测点重新拟合标定文件的预填充系数

用法：
    python scripts/fit_calibration.py app/data/calibration_default.yaml
    python scripts/fit_calibration.py calib.yaml --samples measured.csv --out calib_fitted.yaml

samples 为两列 CSV（tokens, seconds）；缺省时用文件自带的 reference_points
追加预填充系数默认与全量预填充一致（a_lin, b_cross = a_lin, b_quad）
"""

import argparse
import logging
import sys
from pathlib import Path

# 确保项目根目录在 Python 路径中
project_root = Path(__file__).parent.parent
if str(project_root) not in sys.path:
    sys.path.insert(0, str(project_root))

import pandas as pd
import yaml

from app.schemas.calibration import ReferencePoint
from app.services.cost_model import calibration_hash, fit_prefill_coefficients, full_prefill_time, load_calibration
from app.services.exceptions import ServiceException

logger = logging.getLogger("fit_calibration")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="拟合预填充系数并写回标定文件")
    parser.add_argument("calibration", help="标定文件（YAML）")
    parser.add_argument("--samples", help="实测 CSV：tokens,seconds")
    parser.add_argument("--keep-append", action="store_true", help="不改动追加预填充系数")
    parser.add_argument("--out", help="输出路径（缺省覆盖原文件）")
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')

    try:
        calib = load_calibration(args.calibration)
        if args.samples:
            frame = pd.read_csv(args.samples)
            points = [ReferencePoint(tokens=int(r.tokens), seconds=float(r.seconds)) for r in frame.itertuples()]
        else:
            points = list(calib.reference_points)
        a_lin, b_quad = fit_prefill_coefficients([(p.tokens, p.seconds) for p in points])
    except ServiceException as e:
        logger.error(f"拟合失败: {e}")
        return 2

    update = {
        "full_prefill_coeffs": calib.full_prefill_coeffs.model_copy(update={"a_lin": a_lin, "b_quad": b_quad}),
        "reference_points": points,
    }
    if not args.keep_append:
        update["append_prefill_coeffs"] = calib.append_prefill_coeffs.model_copy(update={"a_lin": a_lin, "b_cross": b_quad})
    fitted = calib.model_copy(update=update)

    for p in points:
        logger.info(f"t({p.tokens}) 实测 {p.seconds:.6f}s，拟合 {full_prefill_time(p.tokens, fitted):.6f}s")

    out = Path(args.out or args.calibration)
    with open(out, "w", encoding="utf-8") as f:
        yaml.safe_dump(fitted.model_dump(mode="json"), f, sort_keys=False, allow_unicode=True)
    logger.info(f"a_lin={a_lin:.6g} b_quad={b_quad:.6g} -> {out} (hash={calibration_hash(fitted)[:12]})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
