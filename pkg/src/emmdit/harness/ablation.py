"""Resource columns of the published ablation tables, recomputed from configs.

Every row builds the class-conditional single-stream DiT-L/2 ablation model
(256 tokens, no text stream) with one design toggled, counts parameters on
a lazily instantiated model and FLOPs with the analyzer, and lists the
published figures next to them. Quality metrics (FID/IS) need full-scale
ImageNet training and are reported as not reproduced.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

from .. import config as cfgs
from ..analyzer import count_flops
from ..asa import AsaSchedule
from ..config import ModelConfig
from ..model import build_model

NOT_REPRODUCED = "not reproduced (full-scale training out of scope)"

TABLES = {
    "ds": "compression strategies",
    "blks": "block configurations (N1, N2, N3)",
    "pos": "position reinforcement",
    "asa": "alternating subregion attention (attention matmul FLOPs)",
    "adaln": "modulation",
}

# relative tolerances: the baseline is pinned tighter than the redesigned rows
BASELINE_TOL = {"params": 0.01, "flops": 0.02}
DESIGN_TOL = {"params": 0.02, "flops": 0.05}
RATIO_TOL = 0.02


@dataclass(frozen=True)
class AblationRow:
    table: str
    label: str
    cfg: ModelConfig
    published_flops: float | None  # G; for the asa table, attention-only FLOPs
    published_params: float | None  # M
    published_fid: float
    published_is: float
    baseline: bool = False


@dataclass
class RowResult:
    row: AblationRow
    params_m: float
    flops_g: float
    attention_g: float
    ratio: float | None = None  # attention FLOPs relative to the table's first row
    published_ratio: float | None = None
    checks: dict[str, bool] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(self.checks.values())

    def delta(self, ours: float, published: float | None) -> float | None:
        return None if published is None else (ours - published) / published


def _full() -> ModelConfig:
    return cfgs.two_branch()


def _asa(pairs) -> ModelConfig:
    return cfgs.dit_l2().replace(asa_schedule=AsaSchedule.from_pairs(pairs))


def table_rows(table: str) -> list[AblationRow]:
    dit = cfgs.dit_l2()
    f = _full()
    tb_fid, tb_is = 22.42, 58.65
    if table == "ds":
        return [
            AblationRow(table, "DiT L/2", dit, 161.42, 458, 23.33, 58.18, baseline=True),
            AblationRow(table, "Two-branch", f, 89.77, 343, tb_fid, tb_is),
            AblationRow(table, "w/o skip", f.replace(use_skip=False), 89.23, 342, 28.75, 48.16),
            AblationRow(table, "2x only", f.replace(compression="2x"), 81.58, 323, 23.78, 56.03),
            AblationRow(table, "4x only", f.replace(compression="4x"), 61.93, 336, 33.52, 41.43),
            AblationRow(table, "Stacked 2x", f.replace(compression="stacked_2x"), 73.56, 333, 24.22, 54.99),
        ]
    if table == "blks":
        return [
            AblationRow(table, "DiT L/2", dit, 161.42, 458, 23.33, 58.18, baseline=True),
            AblationRow(table, "(4, 16, 4)", f, 89.77, 343, tb_fid, tb_is),
            AblationRow(table, "(2, 20, 2)", f.replace(block_groups=(2, 20, 2)), 71.45, 343, 29.34, 45.85),
            AblationRow(table, "(0, 24, 0)", f.replace(block_groups=(0, 24, 0)), 53.31, 343, 44.99, 30.18),
            AblationRow(table, "(8, 8, 8)", f.replace(block_groups=(8, 8, 8)), 126.05, 343, 23.47, 55.40),
        ]
    if table == "pos":
        return [
            AblationRow(table, "PR_R", f, 89.77, 343, tb_fid, tb_is),
            AblationRow(table, "w/o PR", f.replace(position_reinforcement="off"), 89.77, 343, 24.78, 53.85),
            AblationRow(table, "PR_C", f.replace(position_reinforcement="compressed_only"), 89.77, 343, 26.56, 51.23),
            AblationRow(table, "PR_CR", f.replace(position_reinforcement="both"), 89.77, 343, 23.92, 54.94),
        ]
    if table == "asa":
        return [
            AblationRow(table, "w/o ASA", dit, 12.9, None, 23.33, 58.18, baseline=True),
            AblationRow(table, "(1:1, 4:1, 4:4)", _asa([(1, 1), (4, 1), (4, 4)]), 6.4, None, 23.50, 59.40),
            AblationRow(table, "(4:1, 4:4, 1:1)", _asa([(4, 1), (4, 4), (1, 1)]), 6.4, None, 24.55, 57.88),
            AblationRow(table, "(4:1, 4:4)", _asa([(4, 1), (4, 4)]), 3.2, None, 26.54, 55.16),
            AblationRow(table, "(4:1, 1:1, 4:4)", _asa([(4, 1), (1, 1), (4, 4)]), 6.4, None, 24.69, 57.17),
        ]
    if table == "adaln":
        return [
            AblationRow(table, "DiT L/2", dit, 161.42, 458, 23.33, 58.18, baseline=True),
            AblationRow(table, "AdaLN-Single", f.replace(modulation_mode="adaln_single"), 89.77, 343, 22.94, 56.60),
            AblationRow(table, "AdaLN-Affine", f, 89.77, 343, tb_fid, tb_is),
        ]
    raise KeyError(f"unknown ablation table {table!r}; expected one of {sorted(TABLES)}")


def _within(ours: float, published: float, tol: float) -> bool:
    return abs(ours - published) <= tol * abs(published)


def run_ablation(table: str) -> list[RowResult]:
    results = []
    base_attention = None
    for row in table_rows(table):
        report = count_flops(row.cfg)
        live = build_model(row.cfg, materialize=False).num_parameters()
        res = RowResult(row, live / 1e6, report.gflops, report.attention_flops / 1e9)
        res.checks["params_exact"] = live == report.param_count
        tol = BASELINE_TOL if row.baseline else DESIGN_TOL
        if table == "asa":
            if base_attention is None:
                base_attention = (res.attention_g, row.published_flops)
            res.ratio = res.attention_g / base_attention[0]
            res.published_ratio = row.published_flops / base_attention[1]
            res.checks["ratio"] = abs(res.ratio - res.published_ratio) <= RATIO_TOL
        else:
            res.checks["params"] = _within(res.params_m, row.published_params, tol["params"])
            res.checks["flops"] = _within(res.flops_g, row.published_flops, tol["flops"])
        results.append(res)
    return results


def run_all() -> dict[str, list[RowResult]]:
    return {t: run_ablation(t) for t in TABLES}


def _fmt(v: float | None, spec: str) -> str:
    return "" if v is None else format(v, spec)


def to_records(results: list[RowResult]) -> list[dict]:
    out = []
    for r in results:
        row = r.row
        rec = {
            "table": row.table,
            "row": row.label,
            "params_M": round(r.params_m, 3),
            "published_params_M": row.published_params,
            "params_delta": r.delta(r.params_m, row.published_params),
            "flops_G": round(r.flops_g, 3),
            "published_flops_G": None if row.table == "asa" else row.published_flops,
            "flops_delta": None if row.table == "asa" else r.delta(r.flops_g, row.published_flops),
            "attention_G": round(r.attention_g, 4),
            "published_attention_G": row.published_flops if row.table == "asa" else None,
            "attention_ratio": r.ratio,
            "published_attention_ratio": r.published_ratio,
            "published_FID": row.published_fid,
            "published_IS": row.published_is,
            "FID_IS": NOT_REPRODUCED,
            "ok": r.ok,
        }
        out.append(rec)
    return out


def render_text(table: str, results: list[RowResult]) -> str:
    lines = [f"[{table}] {TABLES[table]}"]
    if table == "asa":
        lines.append(f"{'setting':<18}{'attn GFLOPs':>12}{'ref':>8}{'ratio':>8}{'ref':>8}  FID/IS")
        for r in results:
            lines.append(
                f"{r.row.label:<18}{r.attention_g:>12.3f}{r.row.published_flops:>8.1f}{r.ratio:>8.3f}"
                f"{r.published_ratio:>8.3f}  {NOT_REPRODUCED}"
            )
        lines.append("absolute attention FLOPs follow a convention that is not derivable here; ratios are compared")
    else:
        lines.append(
            f"{'model':<14}{'GFLOPs':>9}{'ref':>9}{'delta':>8}{'Params M':>10}{'ref':>7}{'delta':>8}  FID/IS"
        )
        for r in results:
            fd, pd = r.delta(r.flops_g, r.row.published_flops), r.delta(r.params_m, r.row.published_params)
            lines.append(
                f"{r.row.label:<14}{r.flops_g:>9.2f}{r.row.published_flops:>9.2f}{100 * fd:>7.2f}%"
                f"{r.params_m:>10.2f}{r.row.published_params:>7.0f}{100 * pd:>7.2f}%  {NOT_REPRODUCED}"
            )
    bad = [r.row.label for r in results if not r.ok]
    lines.append("all rows within tolerance" if not bad else f"OUT OF TOLERANCE: {', '.join(bad)}")
    return "\n".join(lines)


def to_csv(records: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(records[0]), lineterminator="\n")
    writer.writeheader()
    for rec in records:
        writer.writerow({k: _fmt(v, ".6g") if isinstance(v, float) else v for k, v in rec.items()})
    return buf.getvalue()


def write_report(results: dict[str, list[RowResult]], out_dir: str | Path) -> list[Path]:
    """CSV of every row plus one bar figure per table; returns the written paths."""
    from .plotting import ablation_figure

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = [rec for t in results for rec in to_records(results[t])]
    paths = [out / "ablation.csv"]
    paths[0].write_text(to_csv(records))
    for table, rows in results.items():
        paths.append(ablation_figure(table, to_records(rows), out / f"ablation_{table}.png"))
    return paths
