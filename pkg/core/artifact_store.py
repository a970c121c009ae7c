"""
產物存儲
以帶格式版本號的 JSON 持久化模型與語料索引，並讀寫 JSONL 記錄檔
"""
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Type, TypeVar, Union

from pydantic import BaseModel

from .error_handler import ArtifactVersionError, InvalidInputError

logger = logging.getLogger(__name__)

ModelT = TypeVar("ModelT", bound=BaseModel)
PathLike = Union[str, Path]


class ArtifactStore:
    """版本化 JSON 產物存儲"""

    def __init__(self, kind: str, format_version: int):
        """
        初始化產物存儲

        Args:
            kind: 產物種類（例如 "tree_ensemble"、"corpus_index"）
            format_version: 目前程式碼寫出與接受的格式版本
        """
        self.kind = kind
        self.format_version = format_version

    def save(self, path: PathLike, body: Dict[str, Any]):
        """把產物主體連同種類與版本寫入文件"""
        document = {"kind": self.kind, "format_version": self.format_version, **body}
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(document, f, ensure_ascii=False, sort_keys=True)
        logger.info(f"已保存 {self.kind} 到 {path}")

    def dumps(self, body: Dict[str, Any]) -> str:
        return json.dumps({"kind": self.kind, "format_version": self.format_version, **body},
                          ensure_ascii=False, sort_keys=True)

    def loads(self, text: str) -> Dict[str, Any]:
        """解析並檢查版本；版本或種類不符時直接失敗"""
        document = json.loads(text)
        if document.get("kind") != self.kind:
            raise ArtifactVersionError(
                f"產物種類不符: 期望 {self.kind}，實際 {document.get('kind')}")
        version = document.get("format_version")
        if version != self.format_version:
            raise ArtifactVersionError(
                f"{self.kind} 格式版本不符: 期望 {self.format_version}，實際 {version}")
        return document

    def load(self, path: PathLike) -> Dict[str, Any]:
        with open(path, 'r', encoding='utf-8') as f:
            return self.loads(f.read())


def parse_jsonl(lines: Iterable[str], model: Type[ModelT], source: str = "<stream>") -> List[ModelT]:
    """逐行解析 JSONL 文字（檔案或標準輸入），空行略過；錯誤訊息帶來源與行號"""
    records = []
    for line_no, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            records.append(model.model_validate_json(line))
        except ValueError as e:
            raise InvalidInputError(f"{source}:{line_no}: {e}") from e
    return records


def read_jsonl(path: PathLike, model: Type[ModelT]) -> List[ModelT]:
    """
    讀取 JSONL 文件

    Args:
        path: 文件路徑
        model: 每行對應的 pydantic 模型

    Returns:
        模型實例列表
    """
    with open(path, 'r', encoding='utf-8') as f:
        return parse_jsonl(f, model, str(path))


def iter_json_lines(path: PathLike) -> Iterator[Dict[str, Any]]:
    """逐行讀出原始 JSON 物件（格式需要自動判斷時使用）"""
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as e:
                raise InvalidInputError(f"{path}:{line_no}: {e}") from e


def dumps_jsonl(records: Iterable[BaseModel]) -> str:
    return "".join(record.model_dump_json(exclude_none=True) + "\n" for record in records)


def write_jsonl(path: PathLike, records: Iterable[BaseModel]):
    with open(path, 'w', encoding='utf-8') as f:
        f.write(dumps_jsonl(records))
