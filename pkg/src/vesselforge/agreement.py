"""Inter-method agreement of stratified vessel volumes via ICC(2,1).

The form is two-way random effects, absolute agreement, single measurement:

    ICC = (MS_R - MS_E) / (MS_R + (k-1) MS_E + (k/n) (MS_C - MS_E))

with MS_R, MS_C, MS_E the subject, method, and residual mean squares of the
two-way ANOVA decomposition, n subjects and k=2 methods. Absolute agreement
is deliberate: a method with a systematic volume bias must score lower. When
every value is identical the data are degenerate and the ICC is defined as
1.0 (flagged in reports).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

STRATA = ("< 5", "5 - 10", "> 10")


@dataclass(frozen=True)
class AgreementInput:
    subjects: tuple[str, ...]
    method_a_mm3: tuple[float, ...]
    method_b_mm3: tuple[float, ...]

    def validate(self) -> None:
        n = len(self.subjects)
        if n < 2:
            raise ValueError(f"need >= 2 subjects, got {n}")
        if len(self.method_a_mm3) != n or len(self.method_b_mm3) != n:
            raise ValueError("per-method volume lists must match the subject list length")
        if any(v < 0 for v in self.method_a_mm3 + self.method_b_mm3):
            raise ValueError("volumes must be >= 0")

    @property
    def degenerate(self) -> bool:
        vals = self.method_a_mm3 + self.method_b_mm3
        return all(v == vals[0] for v in vals)


@dataclass(frozen=True)
class StratumAgreement:
    stratum: str
    icc_ncct_vs_ref: float
    icc_dcctpa_vs_ref: float
    n_subjects: int
    degenerate_ncct: bool = False
    degenerate_dcctpa: bool = False


@dataclass(frozen=True)
class AgreementReport:
    strata: tuple[StratumAgreement, ...]


def icc_2_1(data: AgreementInput) -> float:
    """ICC(2,1) of the two measurement columns; degenerate all-equal data
    returns 1.0.

    Returns the raw mean-square ratio, which on pathological inputs (tiny
    subject variance with huge residual variance) can fall below -1; reports
    clamp into [-1, 1]. A zero denominator with nonzero numerator (only
    reachable through exact cancellation) maps to +-1 by the numerator sign.
    """
    data.validate()
    if data.degenerate:
        return 1.0
    table = np.stack(
        [np.asarray(data.method_a_mm3, dtype=np.float64),
         np.asarray(data.method_b_mm3, dtype=np.float64)],
        axis=1,
    )
    n, k = table.shape
    grand = table.mean()
    row_means = table.mean(axis=1)
    col_means = table.mean(axis=0)
    ms_r = k * ((row_means - grand) ** 2).sum() / (n - 1)
    ms_c = n * ((col_means - grand) ** 2).sum() / (k - 1)
    resid = table - row_means[:, None] - col_means[None, :] + grand
    ms_e = (resid**2).sum() / ((n - 1) * (k - 1))
    num = ms_r - ms_e
    denom = ms_r + (k - 1) * ms_e + (k / n) * (ms_c - ms_e)
    if denom == 0.0:
        return 1.0 if num == 0.0 else float(np.sign(num))
    return float(num / denom)


def consistency_report(case_ids, ncct_volumes, dcctpa_volumes, ref_volumes) -> AgreementReport:
    """Per-stratum ICC of each method against the reference volumes.

    Each *_volumes argument maps case position -> (small, medium, large) mm^3;
    rows are aligned with case_ids.
    """
    ids = tuple(str(c) for c in case_ids)
    n = len(ids)
    if n < 2:
        raise ValueError(f"need >= 2 cases, got {n}")
    for name, vols in (("ncct", ncct_volumes), ("dcctpa", dcctpa_volumes), ("ref", ref_volumes)):
        if len(vols) != n:
            raise ValueError(f"{name} volume rows ({len(vols)}) do not match case count ({n})")
    rows = []
    for s, stratum in enumerate(STRATA):
        ref_col = tuple(float(v[s]) for v in ref_volumes)
        ncct_in = AgreementInput(ids, tuple(float(v[s]) for v in ncct_volumes), ref_col)
        dc_in = AgreementInput(ids, tuple(float(v[s]) for v in dcctpa_volumes), ref_col)
        clamp = lambda v: min(1.0, max(-1.0, v))  # report invariant: [-1, 1]
        rows.append(StratumAgreement(
            stratum=stratum,
            icc_ncct_vs_ref=clamp(icc_2_1(ncct_in)),
            icc_dcctpa_vs_ref=clamp(icc_2_1(dc_in)),
            n_subjects=n,
            degenerate_ncct=ncct_in.degenerate,
            degenerate_dcctpa=dc_in.degenerate,
        ))
    return AgreementReport(strata=tuple(rows))


def agreement_to_json(report: AgreementReport) -> str:
    rows = [
        {"stratum": r.stratum, "icc_ncct_vs_ref": r.icc_ncct_vs_ref,
         "icc_dcctpa_vs_ref": r.icc_dcctpa_vs_ref, "n_subjects": r.n_subjects,
         "degenerate_ncct": r.degenerate_ncct, "degenerate_dcctpa": r.degenerate_dcctpa}
        for r in report.strata
    ]
    return json.dumps({"strata": rows}, indent=2) + "\n"


def agreement_to_csv(report: AgreementReport) -> str:
    lines = ["stratum,icc_ncct_vs_ref,icc_dcctpa_vs_ref,n_subjects"]
    for r in report.strata:
        lines.append(
            f"{r.stratum},{r.icc_ncct_vs_ref!r},{r.icc_dcctpa_vs_ref!r},{r.n_subjects}"
        )
    return "\n".join(lines) + "\n"
