"""
intentir 命令列入口
串接會話切分、標註分析、行為統計、滿意度預測、排序實驗與合成資料產生
"""
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence, TextIO

import click
import pandas as pd

from config import settings
from core.artifact_store import iter_json_lines, parse_jsonl, write_jsonl
from core.behavior_metrics import (behavior_table, click_reason_distribution, correlate_with_satisfaction,
                                   queries_by_intent)
from core.boosting import BoostParams
from core.error_handler import ErrorHandler, InvalidInputError
from core.session_log import RawEvent, Session, filter_sessions, load_events, load_sessions, split_sessions
from core.stats import fleiss_kappa
from core.taxonomy import (ALL_LABELS, BASE_INTENTS, AggregateLabel, HierarchyLevel, IntentLabel,
                           aggregate_majority, cooccurrence_matrix, intent_distribution, kappa_table,
                           load_annotations, multi_breakdown)
from tools.ltr import (METRICS, RANKERS, compare_modes, cross_validate, labels_from_clicks, load_instances,
                       trec_run_lines)
from tools.rankers import LtrParams
from tools.reporting import FORMATS, render_report, write_lines, write_report
from tools.satisfaction import GROUP_CHOICES, MODES, build_instances, load_instances as load_sat_instances
from tools.satisfaction import feature_group_grid, run_experiment
from tools.synthgen import (conflict_relevance_functions, generate_confounded_satisfaction, generate_ranking_data,
                            generate_satisfaction, generate_sessions, load_profiles)
from tools.text_features import Corpus

logger = logging.getLogger(__name__)

DEFAULT_PROFILE = Path(__file__).resolve().parent / "profiles" / "paper_tables.json"

input_path = click.argument("path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
format_option = click.option("--format", "fmt", type=click.Choice(FORMATS), default="csv", show_default=True,
                             help="報表格式")
output_option = click.option("--output", type=click.Path(dir_okay=False, path_type=Path), default=None,
                             help="輸出檔案，預設寫到標準輸出")
seed_option = click.option("--seed", type=int, default=None, help="隨機種子，預設取 INTENTIR_SEED")


def _seed(seed: Optional[int]) -> int:
    return settings.seed if seed is None else seed


def _report(frame: pd.DataFrame, fmt: str, output: Optional[Path], seed: Optional[int] = None,
            to_stderr: bool = False):
    context = click.get_current_context()
    params = {k: str(getattr(v, "name", v) if hasattr(v, "read") else v) for k, v in context.params.items()}
    params["command"] = context.info_name
    if to_stderr:
        click.echo(render_report(frame, fmt, _seed(seed), params), err=True, nl=False)
    else:
        write_report(frame, fmt, output, _seed(seed), params)


def _read_sessions(path: Path, min_terms: Optional[int] = None) -> List[Session]:
    """讀入會話 JSONL；若檔案是原始事件則先切分會話"""
    first = next(iter_json_lines(path), None)
    if first is None:
        raise InvalidInputError(f"{path} 是空檔案")
    if "kind" in first:
        sessions = split_sessions(load_events(path)).sessions
    else:
        sessions = load_sessions(path)
    return filter_sessions(sessions, min_terms) if min_terms is not None else sessions


@click.group()
@click.option("--verbose", is_flag=True, help="輸出 DEBUG 日誌")
def cli(verbose: bool):
    """法律案例檢索意圖分析工具"""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s", force=True)


@cli.command()
@click.argument("events", type=click.File("r", encoding="utf-8"), default="-")
@click.option("--gap-minutes", type=float, default=None, help="會話切分間隔（分鐘）")
@click.option("--min-terms", type=int, default=None, help="最長查詢的最少詞項數")
@click.option("--hover-min-seconds", type=float, default=None, help="懸停的最短持續時間")
@click.option("--report", "report_path", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="切分摘要報表，預設寫到標準錯誤")
@format_option
@output_option
def sessions(events: TextIO, gap_minutes: Optional[float], min_terms: Optional[int],
             hover_min_seconds: Optional[float], report_path: Optional[Path], fmt: str, output: Optional[Path]):
    """把原始事件切分成會話（JSONL）；EVENTS 省略或為 - 時讀標準輸入"""
    raw = parse_jsonl(events, RawEvent, getattr(events, "name", "<stdin>"))
    report = split_sessions(raw, gap_minutes=gap_minutes, hover_min_seconds=hover_min_seconds)
    kept = filter_sessions(report.sessions, min_terms)
    write_lines((s.model_dump_json(exclude_none=True) for s in kept), output)

    summary = pd.DataFrame([{**report.summary(), "kept_sessions": len(kept)}])
    _report(summary, fmt, report_path, to_stderr=report_path is None)


@cli.command()
@input_path
@format_option
@output_option
def aggregate(path: Path, fmt: str, output: Optional[Path]):
    """多數決聚合每個條目的標註"""
    rows = []
    for annotations in load_annotations(path):
        label = aggregate_majority(annotations)
        intents = label.potential_intents or frozenset()
        rows.append({
            "item_id": annotations.item_id,
            "label": label.value.value,
            "explanation": label.explanation,
            "potential_intents": ";".join(i.value for i in BASE_INTENTS if i in intents) or None,
        })
    _report(pd.DataFrame(rows, columns=["item_id", "label", "explanation", "potential_intents"]), fmt, output)


@cli.command()
@input_path
@format_option
@output_option
def kappa(path: Path, fmt: str, output: Optional[Path]):
    """Fleiss's kappa（7 個標籤類別）"""
    sets = load_annotations(path)
    table = kappa_table(sets)
    frame = pd.DataFrame([{"items": table.shape[0], "raters": int(table[0].sum()) if len(table) else 0,
                           "categories": len(ALL_LABELS), "kappa": fleiss_kappa(table)}])
    _report(frame, fmt, output)


@cli.command()
@input_path
@format_option
@output_option
def distribution(path: Path, fmt: str, output: Optional[Path]):
    """聚合標籤的意圖分佈，附 Multi 的來源拆分"""
    sets = load_annotations(path)
    aggregated = [aggregate_majority(s) for s in sets]
    total = len(aggregated)
    rows = [{"label": label.value, "count": int(round(share * total)), "proportion": share}
            for label, share in intent_distribution(aggregated).items()]
    for part, count in multi_breakdown(sets).items():
        rows.append({"label": f"{AggregateLabel.MULTI.value}.{part}", "count": count, "proportion": count / total})
    _report(pd.DataFrame(rows, columns=["label", "count", "proportion"]), fmt, output)


@cli.command()
@input_path
@format_option
@output_option
def cooccurrence(path: Path, fmt: str, output: Optional[Path]):
    """Multi 條目的意圖共現矩陣"""
    sets = [s for s in load_annotations(path) if aggregate_majority(s).value is AggregateLabel.MULTI]
    result = cooccurrence_matrix(sets)
    codes = [intent.value for intent in result.labels]
    frame = pd.DataFrame(result.matrix, columns=codes)
    frame.insert(0, "intent", codes)
    logger.info(f"共現配對 {result.pair_count} 個，略過 {result.skipped} 個條目")
    _report(frame, fmt, output)


def _intent_rows(sessions: Sequence[Session], threshold: Optional[float]) -> pd.DataFrame:
    """每個 (意圖, 度量) 一行：均值、樣本數，以及跨意圖的檢定結果"""
    rows = []
    for row in behavior_table(sessions, HierarchyLevel.INTENT, threshold):
        for intent, mean in row.means.items():
            rows.append({"group": row.group, "measure": row.measure, "intent": intent, "mean": mean,
                         "n": row.counts[intent], "H": row.statistic, "p_value": row.p_value,
                         "p_holm": row.p_adjusted, "stars": row.stars})
    return pd.DataFrame(rows, columns=["group", "measure", "intent", "mean", "n", "H", "p_value", "p_holm",
                                       "stars"])


@cli.command()
@input_path
@click.option("--by", "by", type=click.Choice(["intent", "criterion1", "criterion3", "click-reasons"]),
              default="criterion1", show_default=True, help="分組方式")
@click.option("--min-terms", type=int, default=None, help="最長查詢的最少詞項數")
@click.option("--threshold", type=float, default=None, help="滿意點擊的停留時間閾值（秒）")
@format_option
@output_option
def behavior(path: Path, by: str, min_terms: Optional[int], threshold: Optional[float], fmt: str,
             output: Optional[Path]):
    """各意圖的行為度量比較（輸入可為會話或原始事件）"""
    sessions = _read_sessions(path, min_terms)
    if by == "intent":
        frame = _intent_rows(sessions, threshold)
    elif by == "click-reasons":
        report = click_reason_distribution(queries_by_intent(sessions))
        rows = []
        for reason, test in report.anova.items():
            row = {"reason": reason}
            row.update({intent: shares[reason] for intent, shares in report.proportions.items()})
            row.update({"F": test.statistic if test else None, "p_value": test.p_value if test else None})
            rows.append(row)
        frame = pd.DataFrame(rows)
    else:
        rows = []
        for row in behavior_table(sessions, HierarchyLevel(by), threshold):
            flat = {"group": row.group, "measure": row.measure}
            flat.update({f"mean_{g}": v for g, v in row.means.items()})
            flat.update({f"n_{g}": v for g, v in row.counts.items()})
            flat.update({"H": row.statistic, "p_value": row.p_value, "p_holm": row.p_adjusted, "stars": row.stars})
            rows.append(flat)
        frame = pd.DataFrame(rows)
    _report(frame, fmt, output)


@cli.command()
@input_path
@click.option("--star-alpha", type=float, default=0.001, show_default=True, help="標記顯著的 p 值門檻")
@format_option
@output_option
def correlate(path: Path, star_alpha: float, fmt: str, output: Optional[Path]):
    """線上指標與滿意度的相關（輸入可為會話或原始事件）"""
    cells = correlate_with_satisfaction(queries_by_intent(_read_sessions(path)), star_alpha)
    frame = pd.DataFrame([c.model_dump() for c in cells], columns=["intent", "metric", "n", "r", "p_value",
                                                                    "significant"])
    _report(frame, fmt, output)


@cli.command()
@input_path
@click.option("--mode", type=click.Choice(MODES + ("grid",)), default="grid", show_default=True)
@click.option("--groups", "groups", type=click.Choice(GROUP_CHOICES), multiple=True, help="特徵分組，可重複")
@click.option("--intent", type=click.Choice([i.value for i in BASE_INTENTS]), default=None,
              help="per_intent 模式的意圖")
@click.option("--folds", type=int, default=None)
@click.option("--n-trees", type=int, default=None, help="提升樹數量")
@seed_option
@format_option
@output_option
def sat(path: Path, mode: str, groups: Sequence[str], intent: Optional[str], folds: Optional[int],
        n_trees: Optional[int], seed: Optional[int], fmt: str, output: Optional[Path]):
    """滿意度預測 AUC（輸入可為會話、原始事件或滿意度樣本）"""
    first = next(iter_json_lines(path), None)
    if first is not None and "features" in first:
        instances = load_sat_instances(path)
    else:
        instances = build_instances(_read_sessions(path))
    seed = _seed(seed)
    params = BoostParams(seed=seed, **({"n_trees": n_trees} if n_trees is not None else {}))
    if mode == "grid":
        rows = [{"feature_group": r.feature_group, **r.cells}
                for r in feature_group_grid(instances, folds, seed, params, groups or GROUP_CHOICES)]
    else:
        result = run_experiment(instances, mode, groups or ("All",), folds, seed, params,
                                intent=IntentLabel(intent) if intent else None)
        rows = [{"mode": result.mode, "feature_groups": "+".join(result.feature_groups), "intent": result.intent,
                 "auc": result.auc, "fold_aucs": ";".join(f"{a:.6f}" for a in result.fold_aucs),
                 "n": result.n_instances}]
    _report(pd.DataFrame(rows), fmt, output, seed)


@cli.command()
@input_path
@click.option("--algo", type=click.Choice(sorted(RANKERS) + ["all"]), default="all", show_default=True)
@click.option("--intent-aware", is_flag=True, help="同時訓練意圖感知模型並與意圖無關模型比較")
@click.option("--force-shared", is_flag=True, help="意圖感知模式下讓所有子排序器共用同一模型")
@click.option("--corpus", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None,
              help="輸入為會話時，用來計算內容特徵的語料（JSONL 或已保存的索引）")
@click.option("--folds", type=int, default=None)
@click.option("--val-fraction", type=float, default=None)
@click.option("--run-output", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="寫出 TREC 格式的排序結果")
@seed_option
@format_option
@output_option
def rank(path: Path, algo: str, intent_aware: bool, force_shared: bool, corpus: Optional[Path],
         folds: Optional[int], val_fraction: Optional[float], run_output: Optional[Path], seed: Optional[int],
         fmt: str, output: Optional[Path]):
    """排序學習交叉驗證（輸入可為排序樣本，或會話加語料）"""
    first = next(iter_json_lines(path), None)
    if first is not None and "features" in first:
        instances = load_instances(path)
    else:
        if corpus is None:
            raise InvalidInputError("輸入為會話時需要 --corpus")
        index = Corpus.load(corpus) if next(iter_json_lines(corpus), {}).get("kind") else Corpus.load_jsonl(corpus)
        instances = labels_from_clicks(_read_sessions(path), index)
    seed = _seed(seed)
    algorithms = sorted(RANKERS) if algo == "all" else [algo]
    params = LtrParams(boost=BoostParams(seed=seed))
    rows = []
    runs = []
    if intent_aware and not force_shared:
        for row in compare_modes(instances, algorithms, folds, val_fraction, seed, params):
            flat = {"algorithm": row.algorithm}
            for metric in METRICS:
                flat[f"base_{metric}"] = row.base[metric]
                flat[f"aware_{metric}"] = row.aware[metric]
                flat[f"improvement_{metric}"] = row.improvement[metric]
            flat.update({"t": row.ttest_statistic, "p_value": row.ttest_p_value})
            rows.append(flat)
        if run_output is not None:
            for algorithm in algorithms:
                report = cross_validate(instances, algorithm, "aware", folds, val_fraction, seed, params)
                runs.extend(trec_run_lines(report.run, f"{algorithm}-aware"))
    else:
        mode = "aware" if intent_aware else "agnostic"
        for algorithm in algorithms:
            report = cross_validate(instances, algorithm, mode, folds, val_fraction, seed, params,
                                    force_shared=force_shared)
            rows.append({"algorithm": algorithm, "intent_mode": mode, **report.metrics})
            runs.extend(trec_run_lines(report.run, f"{algorithm}-{mode}"))
    if run_output is not None:
        write_lines(runs, run_output)
    _report(pd.DataFrame(rows), fmt, output, seed)


@cli.command()
@click.option("--kind", type=click.Choice(["sessions", "ranking", "satisfaction"]), default="sessions",
              show_default=True)
@click.option("--profile", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=DEFAULT_PROFILE,
              help="意圖剖面檔")
@click.option("--n", "n", type=int, default=500, show_default=True, help="會話數（ranking 為查詢數）")
@click.option("--docs-per-query", type=int, default=10, show_default=True)
@click.option("--noise", type=float, default=0.1, show_default=True, help="排序資料的點擊雜訊")
@click.option("--confounded", is_flag=True, help="satisfaction：產生特徵關係隨意圖反轉的資料")
@click.option("--corpus-output", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="ranking：保存合成語料索引")
@seed_option
@output_option
def synth(kind: str, profile: Path, n: int, docs_per_query: int, noise: float, confounded: bool,
          corpus_output: Optional[Path], seed: Optional[int], output: Optional[Path]):
    """產生合成資料（JSONL）"""
    seed = _seed(seed)
    if kind == "satisfaction" and confounded:
        records = generate_confounded_satisfaction(n, seed)
    elif kind == "satisfaction":
        records = generate_satisfaction(load_profiles(profile), n, seed=seed)
    elif kind == "ranking":
        profiles = load_profiles(profile)
        functions = conflict_relevance_functions(profiles) or conflict_relevance_functions()
        records, corpus = generate_ranking_data(functions, n, docs_per_query, noise, seed)
        if corpus_output is not None:
            corpus.save(corpus_output)
    else:
        records = generate_sessions(load_profiles(profile), n, seed=seed)
    if output is not None:
        write_jsonl(output, records)
    else:
        write_lines(r.model_dump_json(exclude_none=True) for r in records)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    執行命令列

    Returns:
        退出碼：0 成功，1 輸入或用法錯誤，2 內部錯誤
    """
    handler = ErrorHandler()
    args = list(sys.argv[1:] if argv is None else argv)
    try:
        result = cli.main(args=args, prog_name="intentir", standalone_mode=False)
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.exceptions.Abort:
        return 1
    except click.ClickException as e:
        e.show()
        return 1
    except Exception as e:
        return handler.handle_error(e, {"argv": args})["exit_code"]
    return result if isinstance(result, int) else 0


if __name__ == '__main__':
    sys.exit(main())
