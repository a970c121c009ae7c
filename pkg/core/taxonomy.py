"""
法律案例檢索意圖分類體系
五個基本意圖、三條逐級分類準則、標註聚合，以及意圖分佈與共現分析

曾經存在的第六類 Analysis（撰寫分析報告）已從分類體系中移除，這裡不再建模。
"""
import logging
import math
from collections import Counter
from enum import Enum
from itertools import combinations
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_serializer, field_validator, model_validator

from .artifact_store import read_jsonl, write_jsonl
from .error_handler import InvalidInputError

logger = logging.getLogger(__name__)


class IntentLabel(str, Enum):
    """五個基本意圖類別，值即簡碼"""
    PARTICULAR_CASE = "PC"
    CHARACTERIZATION = "Ch"
    PENALTY = "Pe"
    PROCEDURE = "Pr"
    INTEREST = "In"

    @property
    def code(self) -> str:
        return self.value

    @classmethod
    def from_code(cls, code: str) -> "IntentLabel":
        try:
            return cls(code)
        except ValueError:
            raise InvalidInputError(f"未知的意圖簡碼: {code!r}") from None


class AggregateLabel(str, Enum):
    """標註者的兩個額外選項"""
    OTHERS = "O"
    MULTI = "M"


LabelValue = Union[IntentLabel, AggregateLabel]

# 報表與計數矩陣的固定欄位順序
BASE_INTENTS: Tuple[IntentLabel, ...] = tuple(IntentLabel)
ALL_LABELS: Tuple[LabelValue, ...] = BASE_INTENTS + (AggregateLabel.OTHERS, AggregateLabel.MULTI)


def parse_label(code: str) -> LabelValue:
    """把 7 個簡碼之一轉成標籤"""
    for label in ALL_LABELS:
        if label.value == code:
            return label
    raise InvalidInputError(f"未知的標籤簡碼: {code!r}")


class Purpose(str, Enum):
    """準則一：檢索目的"""
    PARTICULAR_CASE = "PC"
    LEARNING = "Le"


class HierarchyLevel(str, Enum):
    """分類體系的分組層級；intent 為葉節點，即各基礎意圖"""
    INTENT = "intent"
    CRITERION1 = "criterion1"
    CRITERION3 = "criterion3"


class AnnotatorLabel(BaseModel):
    """單一標註者（或聚合後）的標籤"""
    model_config = ConfigDict(frozen=True)

    value: LabelValue
    explanation: Optional[str] = None
    potential_intents: Optional[FrozenSet[IntentLabel]] = None

    @field_serializer('potential_intents')
    def serialize_intents(self, intents: Optional[FrozenSet[IntentLabel]]) -> Optional[List[str]]:
        if intents is None:
            return None
        return [intent.value for intent in IntentLabel if intent in intents]

    @model_validator(mode='after')
    def check_explanation(self) -> 'AnnotatorLabel':
        if self.value is AggregateLabel.OTHERS and not self.explanation:
            raise ValueError("Others 標籤必須附帶說明")
        if self.value is AggregateLabel.MULTI:
            if not self.explanation and not self.potential_intents:
                raise ValueError("Multi 標籤必須附帶說明或可能意圖集合")
            if self.potential_intents is not None and len(self.potential_intents) < 2:
                raise ValueError("Multi 的可能意圖集合至少需要兩個意圖")
        return self


class AnnotationSet(BaseModel):
    """一個條目（問卷回覆或查詢會話）的全部標註"""
    model_config = ConfigDict(frozen=True)

    item_id: str
    labels: Tuple[AnnotatorLabel, ...] = Field(min_length=1)


class CriteriaAnswers(BaseModel):
    """三條分類準則的回答；準則二、三的出現與否取決於前一條的答案"""
    model_config = ConfigDict(frozen=True)

    c1_purpose: Purpose
    c2_clear_objective: Optional[bool] = None
    c3_problem_kind: Optional[IntentLabel] = None

    @field_validator('c3_problem_kind')
    @classmethod
    def check_problem_kind(cls, value: Optional[IntentLabel]) -> Optional[IntentLabel]:
        if value is not None and value not in CRITERION3_INTENTS:
            raise ValueError(f"Criterion 3 只能是 Ch/Pe/Pr，收到 {value.value}")
        return value

    @model_validator(mode='after')
    def check_presence(self) -> 'CriteriaAnswers':
        missing = criteria_violation(self)
        if missing:
            raise ValueError(missing)
        return self


CRITERION3_INTENTS: FrozenSet[IntentLabel] = frozenset(
    {IntentLabel.CHARACTERIZATION, IntentLabel.PENALTY, IntentLabel.PROCEDURE})


def criteria_violation(answers: CriteriaAnswers) -> Optional[str]:
    """回傳違反條件出現規則的描述；合法時回傳 None"""
    learning = answers.c1_purpose is Purpose.LEARNING
    if learning and answers.c2_clear_objective is None:
        return "Criterion 2 (clear objective) is required when Criterion 1 is Learning"
    if not learning and answers.c2_clear_objective is not None:
        return "Criterion 2 must be absent when Criterion 1 is ParticularCase"
    if answers.c2_clear_objective is True and answers.c3_problem_kind is None:
        return "Criterion 3 (problem kind) is required when Criterion 2 is true"
    if answers.c2_clear_objective is not True and answers.c3_problem_kind is not None:
        return "Criterion 3 must be absent unless Criterion 2 is true"
    return None


def classify_by_criteria(answers: CriteriaAnswers) -> IntentLabel:
    """
    依三條準則逐級判定意圖

    Args:
        answers: 準則回答

    Returns:
        五個基本意圖之一
    """
    missing = criteria_violation(answers)
    if missing:
        raise InvalidInputError(missing)

    if answers.c1_purpose is Purpose.PARTICULAR_CASE:
        return IntentLabel.PARTICULAR_CASE
    if answers.c2_clear_objective is False:
        return IntentLabel.INTEREST
    return answers.c3_problem_kind


def _winning_value(labels: Sequence[AnnotatorLabel]) -> Optional[LabelValue]:
    counts = Counter(label.value for label in labels)
    top = max(counts.values())
    winners = [value for value, count in counts.items() if count == top]
    if len(winners) == 1 and top >= math.ceil(len(labels) / 2):
        return winners[0]
    return None


def aggregate_majority(annotations: AnnotationSet) -> AnnotatorLabel:
    """
    多數決聚合

    唯一眾數且獲得至少 ⌈n/2⌉ 票時取之，否則標為 Multi；
    三位標註者時即「兩票相同取之，三票皆異為 Multi」。

    Args:
        annotations: 一個條目的標註

    Returns:
        聚合後的標籤
    """
    labels = annotations.labels
    winner = _winning_value(labels)

    if winner is None:
        possible = frozenset(
            label.value for label in labels if isinstance(label.value, IntentLabel))
        possible |= _multi_intents(labels)
        return AnnotatorLabel(
            value=AggregateLabel.MULTI,
            explanation="annotators disagree",
            potential_intents=possible if len(possible) >= 2 else None,
        )

    voters = [label for label in labels if label.value == winner]
    if winner is AggregateLabel.MULTI:
        possible = _multi_intents(voters)
        explanations = [label.explanation for label in voters if label.explanation]
        return AnnotatorLabel(
            value=AggregateLabel.MULTI,
            explanation=min(explanations) if explanations else "majority Multi",
            potential_intents=possible if len(possible) >= 2 else None,
        )
    if winner is AggregateLabel.OTHERS:
        explanations = [label.explanation for label in voters if label.explanation]
        return AnnotatorLabel(value=winner, explanation=min(explanations))
    return AnnotatorLabel(value=winner)


def _multi_intents(labels: Iterable[AnnotatorLabel]) -> FrozenSet[IntentLabel]:
    possible: FrozenSet[IntentLabel] = frozenset()
    for label in labels:
        if label.value is AggregateLabel.MULTI and label.potential_intents:
            possible |= label.potential_intents
    return possible


def multi_breakdown(sets: Iterable[AnnotationSet]) -> Dict[str, int]:
    """Multi 的兩個來源：多數標註者直接選 Multi，或所有標註者意見不一"""
    breakdown = {"annotator_multi": 0, "all_distinct": 0}
    for annotations in sets:
        winner = _winning_value(annotations.labels)
        if winner is AggregateLabel.MULTI:
            breakdown["annotator_multi"] += 1
        elif winner is None:
            breakdown["all_distinct"] += 1
    return breakdown


def intent_distribution(aggregated: Sequence[AnnotatorLabel]) -> Dict[LabelValue, float]:
    """
    聚合標籤的比例分佈

    Args:
        aggregated: 每個條目的聚合標籤

    Returns:
        標籤 → 比例，依固定順序排列，只含出現過的標籤
    """
    if not aggregated:
        raise InvalidInputError("意圖分佈需要至少一個條目")
    counts = Counter(label.value for label in aggregated)
    total = len(aggregated)
    return {label: counts[label] / total for label in ALL_LABELS if counts[label]}


class CooccurrenceResult(BaseModel):
    """Multi 條目的意圖共現矩陣（基本意圖順序：PC, Ch, Pe, Pr, In）"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    matrix: np.ndarray
    labels: Tuple[IntentLabel, ...] = BASE_INTENTS
    pair_count: int
    skipped: int


def cooccurrence_matrix(sets: Iterable[AnnotationSet]) -> CooccurrenceResult:
    """
    統計 Multi 條目中可能意圖兩兩共現的頻率

    每個條目的可能意圖集合貢獻其所有無序配對各一次，
    最後以配對總數歸一化（上三角之和為 1）。Others 不在矩陣內。

    Args:
        sets: 聚合結果為 Multi 的條目

    Returns:
        對稱的 5×5 矩陣與被略過的條目數
    """
    index = {intent: i for i, intent in enumerate(BASE_INTENTS)}
    counts = np.zeros((len(BASE_INTENTS), len(BASE_INTENTS)), dtype=float)
    pair_count = 0
    skipped = 0

    for annotations in sets:
        aggregated = aggregate_majority(annotations)
        possible = aggregated.potential_intents or frozenset()
        if aggregated.value is not AggregateLabel.MULTI or len(possible) < 2:
            skipped += 1
            continue
        for a, b in combinations(sorted(possible, key=index.get), 2):
            counts[index[a], index[b]] += 1
            pair_count += 1

    if skipped:
        logger.warning(f"共現矩陣略過 {skipped} 個條目（非 Multi 或可能意圖少於兩個）")

    matrix = np.zeros_like(counts)
    if pair_count:
        upper = counts / pair_count
        matrix = upper + upper.T
    return CooccurrenceResult(matrix=matrix, pair_count=pair_count, skipped=skipped)


def kappa_table(sets: Sequence[AnnotationSet],
                categories: Sequence[LabelValue] = ALL_LABELS) -> np.ndarray:
    """條目 × 類別的標註計數矩陣，供 Fleiss's kappa 使用"""
    column = {label: j for j, label in enumerate(categories)}
    table = np.zeros((len(sets), len(categories)), dtype=int)
    for i, annotations in enumerate(sets):
        for label in annotations.labels:
            if label.value not in column:
                raise InvalidInputError(f"類別集合不含標籤 {label.value.value}")
            table[i, column[label.value]] += 1
    return table


def hierarchy_group(label: LabelValue, level: HierarchyLevel) -> Optional[str]:
    """
    把意圖映射到分類體系的某一層

    Args:
        label: 聚合標籤
        level: intent（各基礎意圖）、criterion1（PC 對 Learning）或 criterion3（Ch/Pe/Pr）

    Returns:
        組名簡碼；不屬於該層時為 None
    """
    if not isinstance(label, IntentLabel):
        return None
    if level is HierarchyLevel.INTENT:
        return label.value
    if level is HierarchyLevel.CRITERION1:
        return Purpose.PARTICULAR_CASE.value if label is IntentLabel.PARTICULAR_CASE else Purpose.LEARNING.value
    return label.value if label in CRITERION3_INTENTS else None


def load_annotations(path: Union[str, Path]) -> List[AnnotationSet]:
    """讀取標註 JSONL，條目編號必須互不相同"""
    sets = read_jsonl(path, AnnotationSet)
    seen = set()
    for annotations in sets:
        if annotations.item_id in seen:
            raise InvalidInputError(f"重複的 item_id: {annotations.item_id}")
        seen.add(annotations.item_id)
    logger.info(f"讀入 {len(sets)} 個標註條目")
    return sets


def dump_annotations(path: Union[str, Path], sets: Iterable[AnnotationSet]):
    write_jsonl(path, sets)
