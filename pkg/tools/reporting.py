"""
報表輸出
把結果表格寫成帶重現資訊標頭的 CSV 或 JSON
"""
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional, Union

import pandas as pd

from config import __version__, settings

logger = logging.getLogger(__name__)

FORMATS = ("csv", "json")


def config_hash(params: Optional[Mapping[str, Any]] = None) -> str:
    """設定值與命令參數的 SHA-256 前 12 碼"""
    payload = {"settings": settings.model_dump(mode="json"), "params": dict(params or {})}
    text = json.dumps(payload, sort_keys=True, ensure_ascii=False, default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def report_header(seed: Optional[int], params: Optional[Mapping[str, Any]] = None) -> Dict[str, Any]:
    seed = settings.seed if seed is None else seed
    return {"tool": "intentir", "version": __version__, "seed": seed, "config": config_hash(params)}


def _emit(text: str, output: Optional[Union[str, Path]]):
    if output is None:
        sys.stdout.write(text)
        sys.stdout.flush()
        return
    path = Path(output)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(text)
    logger.info(f"報表已寫入 {path}")


def render_report(frame: pd.DataFrame, fmt: str = "csv", seed: Optional[int] = None,
                  params: Optional[Mapping[str, Any]] = None) -> str:
    """
    渲染報表

    CSV 第一行為 "# intentir <版本> seed=<種子> config=<雜湊>"；
    JSON 為 {"header": {...}, "rows": [...]}，缺值寫成 null。

    Args:
        frame: 報表表格
        fmt: csv 或 json
        seed: 記錄在標頭中的種子
        params: 參與設定雜湊的命令參數

    Returns:
        報表文字
    """
    if fmt not in FORMATS:
        raise ValueError(f"未知的報表格式: {fmt}")
    header = report_header(seed, params)
    if fmt == "csv":
        line = f"# intentir {header['version']} seed={header['seed']} config={header['config']}\n"
        return line + frame.to_csv(index=False, float_format="%.10g", lineterminator="\n")
    rows = frame.astype(object).where(frame.notna(), None).to_dict(orient="records")
    return json.dumps({"header": header, "rows": rows}, ensure_ascii=False, indent=2, default=str) + "\n"


def write_report(frame: pd.DataFrame, fmt: str = "csv", output: Optional[Union[str, Path]] = None,
                 seed: Optional[int] = None, params: Optional[Mapping[str, Any]] = None):
    _emit(render_report(frame, fmt, seed, params), output)


def write_lines(lines: Iterable[str], output: Optional[Union[str, Path]] = None):
    """逐行輸出資料（JSONL、TREC run），不加標頭"""
    _emit("".join(line if line.endswith("\n") else line + "\n" for line in lines), output)
