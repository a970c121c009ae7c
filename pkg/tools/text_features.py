"""
文本特徵
分詞、語料統計，以及查詢-文檔的五個內容特徵（平均 TF、平均 IDF、平均 TF-IDF、BM25、TF-IDF 餘弦）
"""
import logging
import math
import re
from collections import Counter
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

from pydantic import BaseModel, ConfigDict, Field

from config import settings
from core.artifact_store import ArtifactStore, read_jsonl
from core.error_handler import InvalidInputError

logger = logging.getLogger(__name__)

CONTENT_FEATURES = ("avg_tf", "avg_idf", "avg_tfidf", "bm25", "tfidf_cosine")
CORPUS_FORMAT_VERSION = 1

_CJK = "\u3400-\u4dbf\u4e00-\u9fff\uf900-\ufaff"
_TOKEN_RE = re.compile(f"[{_CJK}]+|(?:(?![{_CJK}])[^\\W_])+")
_CJK_RUN_RE = re.compile(f"[{_CJK}]+")


def tokenize(text: str, cjk_bigrams: Optional[bool] = None) -> List[str]:
    """
    分詞：轉小寫，以空白與標點切分；連續的中日韓字元展開為重疊雙字

    Args:
        text: 原始文本
        cjk_bigrams: 是否展開中日韓字元串，預設取 settings.cjk_bigrams

    Returns:
        詞項列表
    """
    if cjk_bigrams is None:
        cjk_bigrams = settings.cjk_bigrams
    terms = []
    for run in _TOKEN_RE.findall(text.lower()):
        if cjk_bigrams and len(run) > 1 and _CJK_RUN_RE.fullmatch(run):
            terms.extend(run[i:i + 2] for i in range(len(run) - 1))
        else:
            terms.append(run)
    return terms


class Bm25Params(BaseModel):
    """BM25 參數"""
    model_config = ConfigDict(frozen=True)

    k1: float = Field(default_factory=lambda: settings.bm25_k1, ge=0)
    b: float = Field(default_factory=lambda: settings.bm25_b, ge=0, le=1)


class CorpusDocument(BaseModel):
    """語料輸入行 {"doc_id": ..., "text": ...}"""
    doc_id: str
    text: str


class Corpus:
    """
    文檔集合統計

    建立階段只允許單一寫入者；freeze 之後唯讀，可任意並行讀取。
    """

    def __init__(self):
        self.documents: Dict[str, Counter] = {}
        self.doc_length: Dict[str, int] = {}
        self.df: Counter = Counter()
        self._total_length = 0
        self.frozen = False

    @property
    def n_documents(self) -> int:
        return len(self.documents)

    @property
    def avg_dl(self) -> float:
        if not self.documents:
            return 0.0
        return self._total_length / len(self.documents)

    def add_document(self, doc_id: str, terms: Sequence[str]):
        """
        加入一篇已分詞的文檔

        Args:
            doc_id: 文檔 ID，不可重複
            terms: 詞項列表
        """
        if self.frozen:
            raise InvalidInputError("語料已凍結，不能再加入文檔")
        if doc_id in self.documents:
            raise InvalidInputError(f"重複的文檔 ID: {doc_id}")
        tf = Counter(terms)
        self.documents[doc_id] = tf
        self.doc_length[doc_id] = len(terms)
        self._total_length += len(terms)
        self.df.update(tf.keys())

    def add_text(self, doc_id: str, text: str, cjk_bigrams: Optional[bool] = None):
        self.add_document(doc_id, tokenize(text, cjk_bigrams))

    def freeze(self) -> "Corpus":
        self.frozen = True
        logger.info(f"語料已凍結: {self.n_documents} 篇文檔，{len(self.df)} 個詞項，平均長度 {self.avg_dl:.2f}")
        return self

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self.documents

    def tf(self, term: str, doc_id: str) -> int:
        return self.documents[doc_id].get(term, 0)

    def idf(self, term: str) -> float:
        """ln(N/df)；未出現的詞項平滑為 ln(N+1)"""
        df = self.df.get(term, 0)
        if df == 0:
            return math.log(self.n_documents + 1)
        return math.log(self.n_documents / df)

    def bm25_idf(self, term: str) -> float:
        df = self.df.get(term, 0)
        return math.log(1.0 + (self.n_documents - df + 0.5) / (df + 0.5))

    @classmethod
    def from_texts(cls, texts: Dict[str, str], cjk_bigrams: Optional[bool] = None) -> "Corpus":
        corpus = cls()
        for doc_id, text in texts.items():
            corpus.add_text(doc_id, text, cjk_bigrams)
        return corpus.freeze()

    @classmethod
    def load_jsonl(cls, path: Union[str, Path], cjk_bigrams: Optional[bool] = None) -> "Corpus":
        """從 {"doc_id", "text"} 行格式讀取並建立語料"""
        corpus = cls()
        for record in read_jsonl(path, CorpusDocument):
            corpus.add_text(record.doc_id, record.text, cjk_bigrams)
        return corpus.freeze()

    def save(self, path: Union[str, Path]):
        store = ArtifactStore("corpus_index", CORPUS_FORMAT_VERSION)
        store.save(path, {"documents": {doc_id: dict(tf) for doc_id, tf in self.documents.items()},
                          "doc_length": self.doc_length})

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Corpus":
        document = ArtifactStore("corpus_index", CORPUS_FORMAT_VERSION).load(path)
        corpus = cls()
        for doc_id, tf in document["documents"].items():
            terms = [term for term, count in tf.items() for _ in range(count)]
            corpus.add_document(doc_id, terms)
            if corpus.doc_length[doc_id] != document["doc_length"][doc_id]:
                raise InvalidInputError(f"語料索引不一致: {doc_id} 的長度與詞頻總和不符")
        return corpus.freeze()


def _tfidf_cosine(query_tf: Counter, doc_id: str, corpus: Corpus) -> float:
    doc_tf = corpus.documents[doc_id]
    query_vec = {t: c * corpus.idf(t) for t, c in query_tf.items()}
    doc_vec = {t: c * corpus.idf(t) for t, c in doc_tf.items()}
    dot = sum(w * doc_vec.get(t, 0.0) for t, w in query_vec.items())
    norm = math.sqrt(sum(w * w for w in query_vec.values())) * math.sqrt(sum(w * w for w in doc_vec.values()))
    if norm == 0.0:
        return 0.0
    return min(max(dot / norm, 0.0), 1.0)


def content_features(query_terms: Sequence[str], doc_id: str, corpus: Corpus,
                     bm25: Optional[Bm25Params] = None) -> Dict[str, float]:
    """
    計算查詢-文檔的五個內容特徵

    平均值取自所有查詢詞項，文檔中不存在的詞項 tf 計為 0。

    Args:
        query_terms: 查詢詞項（可重複）
        doc_id: 文檔 ID
        corpus: 語料統計
        bm25: BM25 參數

    Returns:
        依 CONTENT_FEATURES 順序的特徵字典
    """
    if not query_terms:
        raise InvalidInputError("查詢為空，無法計算內容特徵")
    if doc_id not in corpus:
        raise InvalidInputError(f"文檔不在語料中: {doc_id}")
    bm25 = bm25 or Bm25Params()

    n_terms = len(query_terms)
    tfs = [corpus.tf(t, doc_id) for t in query_terms]
    idfs = [corpus.idf(t) for t in query_terms]

    length_norm = 1.0 - bm25.b + bm25.b * corpus.doc_length[doc_id] / corpus.avg_dl if corpus.avg_dl > 0 else 1.0
    bm25_score = 0.0
    for t, tf in zip(query_terms, tfs):
        if tf == 0:
            continue
        bm25_score += corpus.bm25_idf(t) * tf * (bm25.k1 + 1) / (tf + bm25.k1 * length_norm)

    return {
        "avg_tf": sum(tfs) / n_terms,
        "avg_idf": sum(idfs) / n_terms,
        "avg_tfidf": sum(tf * idf for tf, idf in zip(tfs, idfs)) / n_terms,
        "bm25": bm25_score,
        "tfidf_cosine": _tfidf_cosine(Counter(query_terms), doc_id, corpus),
    }


def feature_rows(query_terms: Sequence[str], doc_ids: Iterable[str], corpus: Corpus,
                 bm25: Optional[Bm25Params] = None) -> List[List[float]]:
    """對多個候選文檔計算特徵，每行順序同 CONTENT_FEATURES"""
    rows = []
    for doc_id in doc_ids:
        features = content_features(query_terms, doc_id, corpus, bm25)
        rows.append([features[name] for name in CONTENT_FEATURES])
    return rows
