"""Scoring alerts against labeled attacks.

An attack counts as detected when any alert, from any process model,
overlaps the closed interval ``[start, end + grace]``. Each alert is then
classified exactly once:

* TP  - overlaps an attack window (+grace) of an attack on its own process;
* OP  - overlaps only windows of attacks on other processes;
* LT  - starts after the grace window but within the long-tail extension of
        an attack on its process, or of one its process model detected;
* TFP - anything else.

Duplicates collapse into incidents: TP/OP/LT alerts by (process, attack),
TFP alerts of one process when chained within ``dedup_gap``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

from .dataset import DataError, process_of
from .decision import NO, AlertEvent, confidence

TP, OP, LT, TFP = "TP", "OP", "LT", "TFP"
FP_TYPES = (OP, LT, TFP)

GRACE = timedelta(minutes=15)
LT_EXTENSION = timedelta(minutes=60)
DEDUP_GAP = timedelta(minutes=15)


class ClockMismatch(ValueError):
    pass


@dataclass
class AttackLabel:
    id: int
    start: datetime
    end: datetime
    target_tags: list[str]
    expected_detectable: bool = True

    def __post_init__(self):
        if not self.start < self.end:
            raise DataError(f"attack {self.id}: start must precede end")
        if not self.target_tags and self.expected_detectable:
            raise DataError(f"attack {self.id}: detectable attacks need target tags")

    @property
    def target_processes(self) -> set[int]:
        return {process_of(t) for t in self.target_tags}


def load_labels(path: str | Path) -> list[AttackLabel]:
    """Read ``id,start,end,tags,expected_detectable`` rows; tags are ';'-separated."""
    labels = []
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return labels
    header = [h.strip().lower() for h in rows[0]]
    if header[:4] != ["id", "start", "end", "tags"]:
        raise DataError(f"{path}: header must be id,start,end,tags,expected_detectable")
    for lineno, row in enumerate(rows[1:], 2):
        if not row or not "".join(row).strip():
            continue
        try:
            flag = row[4].strip().lower() if len(row) > 4 else "true"
            if flag not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"bad expected_detectable {flag!r}")
            tags = [t.strip() for t in row[3].split(";") if t.strip()]
            labels.append(AttackLabel(
                int(row[0]),
                datetime.fromisoformat(row[1].strip()),
                datetime.fromisoformat(row[2].strip()),
                tags,
                flag in ("true", "1", "yes"),
            ))
        except (ValueError, IndexError) as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
    return labels


def write_labels(labels: list[AttackLabel], path: str | Path) -> None:
    lines = ["id,start,end,tags,expected_detectable"]
    for a in labels:
        lines.append(f"{a.id},{a.start.isoformat()},{a.end.isoformat()},{';'.join(a.target_tags)},"
                     f"{str(a.expected_detectable).lower()}")
    Path(path).write_text("\n".join(lines) + "\n")


def _overlaps(alert: AlertEvent, attack: AttackLabel, grace: timedelta) -> bool:
    try:
        return alert.start <= attack.end + grace and alert.end >= attack.start
    except TypeError:
        raise ClockMismatch("alerts and labels mix timezone-aware and naive timestamps") from None


@dataclass
class DetectionRow:
    attack_id: int
    answer: list[str]
    detected: str  # yes | not_sure | no
    rating: float | None
    attributed_tags: list[str]
    attack_point: str  # first | second | none
    processes: list[int] = field(default_factory=list)
    expected_detectable: bool = True

    @property
    def is_detected(self) -> bool:
        return self.detected != NO


def _attack_point(tags: list[str], answer: list[str]) -> str:
    if tags and tags[0] in answer:
        return "first"
    if len(tags) > 1 and tags[1] in answer:
        return "second"
    return "none"


def match_alerts(
    alerts: list[AlertEvent],
    labels: list[AttackLabel],
    grace: timedelta = GRACE,
    threshold: float = 0.3,
    ratings: dict[int, float] | None = None,
) -> list[DetectionRow]:
    """Per-attack detection status.

    The reported rating and attributed tags come from the overlapping alert
    with the highest peak (earliest start, then lowest process, on ties).
    ``ratings`` optionally supplies the best sub-threshold rating of
    undetected attacks for display.
    """
    rows = []
    for attack in labels:
        hits = [a for a in alerts if _overlaps(a, attack, grace)]
        if hits:
            best = min(hits, key=lambda a: (-a.peak_rating, a.start, a.process_id))
            tags = list(best.attributed_tags)
            rows.append(DetectionRow(
                attack.id, attack.target_tags, confidence(best.peak_rating, threshold),
                best.peak_rating, tags, _attack_point(tags, attack.target_tags),
                sorted({a.process_id for a in hits}), attack.expected_detectable,
            ))
        else:
            r = None if ratings is None else ratings.get(attack.id)
            rows.append(DetectionRow(attack.id, attack.target_tags, NO, r, [], "none", [],
                                     attack.expected_detectable))
    return rows


@dataclass
class ClassifiedAlert:
    alert: AlertEvent
    kind: str
    attack_id: int | None


@dataclass
class Incident:
    process_id: int
    kind: str
    attack_id: int | None
    alerts: list[AlertEvent]

    @property
    def start(self) -> datetime:
        return min(a.start for a in self.alerts)

    @property
    def end(self) -> datetime:
        return max(a.end for a in self.alerts)

    @property
    def tags(self) -> list[str]:
        seen: list[str] = []
        for a in self.alerts:
            for t in a.attributed_tags:
                if t not in seen:
                    seen.append(t)
        return seen


def classify_alerts(
    alerts: list[AlertEvent],
    labels: list[AttackLabel],
    grace: timedelta = GRACE,
    lt_extension: timedelta = LT_EXTENSION,
) -> list[ClassifiedAlert]:
    out: list[ClassifiedAlert] = []
    detected_by: dict[int, set[int]] = {}
    pending = []
    for alert in alerts:
        hits = [x for x in labels if _overlaps(alert, x, grace)]
        own = [x for x in hits if alert.process_id in x.target_processes]
        for x in hits:
            detected_by.setdefault(x.id, set()).add(alert.process_id)
        if own:
            out.append(ClassifiedAlert(alert, TP, own[0].id))
        elif hits:
            out.append(ClassifiedAlert(alert, OP, hits[0].id))
        else:
            out.append(ClassifiedAlert(alert, TFP, None))
            pending.append(len(out) - 1)
    for i in pending:
        alert = out[i].alert
        tails = [
            x for x in labels
            if x.end + grace < alert.start <= x.end + grace + lt_extension
            and (alert.process_id in x.target_processes
                 or alert.process_id in detected_by.get(x.id, ()))
        ]
        if tails:
            related = max(tails, key=lambda x: x.end)
            out[i] = ClassifiedAlert(alert, LT, related.id)
    return out


def deduplicate(classified: list[ClassifiedAlert], dedup_gap: timedelta = DEDUP_GAP) -> list[Incident]:
    incidents: list[Incident] = []
    keyed: dict[tuple, Incident] = {}
    last_tfp: dict[int, Incident] = {}
    for c in sorted(classified, key=lambda c: (c.alert.process_id, c.alert.start)):
        p = c.alert.process_id
        if c.kind == TFP:
            prev = last_tfp.get(p)
            if prev is not None and c.alert.start - prev.end <= dedup_gap:
                prev.alerts.append(c.alert)
                continue
            inc = Incident(p, TFP, None, [c.alert])
            last_tfp[p] = inc
        else:
            key = (p, c.kind, c.attack_id)
            if key in keyed:
                keyed[key].alerts.append(c.alert)
                continue
            inc = keyed[key] = Incident(p, c.kind, c.attack_id, [c.alert])
        incidents.append(inc)
    incidents.sort(key=lambda i: (i.process_id, i.start))
    return incidents


def classify_false_positives(
    alerts: list[AlertEvent],
    labels: list[AttackLabel],
    grace: timedelta = GRACE,
    lt_extension: timedelta = LT_EXTENSION,
    dedup_gap: timedelta = DEDUP_GAP,
) -> list[Incident]:
    """Deduplicated OP / LT / TFP incidents."""
    incidents = deduplicate(classify_alerts(alerts, labels, grace, lt_extension), dedup_gap)
    return [i for i in incidents if i.kind in FP_TYPES]


@dataclass
class AttributionCounts:
    first: int = 0
    second: int = 0
    wrong: int = 0


def score_attribution(rows: list[DetectionRow], labels: list[AttackLabel] | None = None) -> AttributionCounts:
    """First/second-guess attack-point hits over detected, detectable attacks."""
    answers = {x.id: x.target_tags for x in labels} if labels else None
    counts = AttributionCounts()
    for r in rows:
        if not r.is_detected or not r.expected_detectable:
            continue
        point = _attack_point(r.attributed_tags, answers[r.attack_id]) if answers else r.attack_point
        if point == "first":
            counts.first += 1
        elif point == "second":
            counts.second += 1
        else:
            counts.wrong += 1
    return counts


@dataclass
class ProcessSummary:
    process_id: int
    false_positives: int
    all_duplicates: int
    op: int
    lt: int
    tfp: int


@dataclass
class EvaluationReport:
    rows: list[DetectionRow]
    incidents: list[Incident]  # every incident, TP included
    attribution: AttributionCounts
    processes: list[int]
    n_alerts: int

    @property
    def false_positives(self) -> list[Incident]:
        return [i for i in self.incidents if i.kind in FP_TYPES]

    def count(self, kind: str) -> int:
        return sum(1 for i in self.incidents if i.kind == kind)

    @property
    def detected(self) -> int:
        return sum(1 for r in self.rows if r.is_detected and r.expected_detectable)

    @property
    def detectable(self) -> int:
        return sum(1 for r in self.rows if r.expected_detectable)

    def process_summary(self) -> list[ProcessSummary]:
        out = []
        for p in self.processes:
            fps = [i for i in self.false_positives if i.process_id == p]
            out.append(ProcessSummary(
                p, len(fps), sum(len(i.alerts) for i in fps),
                sum(i.kind == OP for i in fps), sum(i.kind == LT for i in fps),
                sum(i.kind == TFP for i in fps),
            ))
        return out


def evaluate(
    alerts: list[AlertEvent],
    labels: list[AttackLabel],
    processes: list[int] | None = None,
    grace: timedelta = GRACE,
    lt_extension: timedelta = LT_EXTENSION,
    dedup_gap: timedelta = DEDUP_GAP,
    threshold: float = 0.3,
    ratings: dict[int, float] | None = None,
) -> EvaluationReport:
    rows = match_alerts(alerts, labels, grace, threshold, ratings)
    incidents = deduplicate(classify_alerts(alerts, labels, grace, lt_extension), dedup_gap)
    if processes is None:
        processes = sorted({a.process_id for a in alerts})
    return EvaluationReport(rows, incidents, score_attribution(rows, labels), processes, len(alerts))


# -- rendering -------------------------------------------------------------


def _fmt_time(t: datetime) -> str:
    return t.isoformat()


def _detected_cell(r: DetectionRow) -> str:
    label = {"yes": "Yes", "not_sure": "Not sure", "no": "No"}[r.detected]
    if r.rating is not None and r.detected != "yes":
        label += f" ({round(100 * r.rating)}%)"
    return label


def _attack_point_cell(r: DetectionRow) -> str:
    if not r.attributed_tags:
        return "N/A"
    first = r.attributed_tags[0]
    if len(r.attributed_tags) > 1:
        return f"{first} ({r.attributed_tags[1]})"
    return first


def _csv(rows: list[list]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def attacks_table(report: EvaluationReport) -> list[list]:
    rows = [["attack", "answer", "detected", "rating", "attack_point", "correct", "processes",
             "expected_detectable"]]
    for r in report.rows:
        rows.append([
            r.attack_id, ";".join(r.answer), r.detected,
            "" if r.rating is None else f"{r.rating:.6f}",
            ";".join(r.attributed_tags), r.attack_point,
            ";".join(str(p) for p in r.processes), str(r.expected_detectable).lower(),
        ])
    return rows


def false_positive_table(report: EvaluationReport) -> list[list]:
    rows = [["process", "no", "start", "end", "related_attack", "tags", "type", "alerts"]]
    for p in report.processes:
        for n, i in enumerate((i for i in report.false_positives if i.process_id == p), 1):
            rows.append([p, n, _fmt_time(i.start), _fmt_time(i.end),
                         "" if i.attack_id is None else i.attack_id, ";".join(i.tags), i.kind,
                         len(i.alerts)])
    return rows


def summary_table(report: EvaluationReport) -> list[list]:
    rows = [["process", "false_positives", "all_duplicates", "OP", "LT", "TFP"]]
    for s in report.process_summary():
        rows.append([s.process_id, s.false_positives, s.all_duplicates, s.op, s.lt, s.tfp])
    return rows


def format_text(report: EvaluationReport) -> str:
    lines = []
    w = (8, 22, 16, 26)
    lines.append(f"{'Attack':<{w[0]}}{'Answer':<{w[1]}}{'Detection':<{w[2]}}{'Attack point':<{w[3]}}")
    lines.append("-" * sum(w))
    for r in report.rows:
        mark = "*" if r.attack_point != "none" else ""
        lines.append(f"{r.attack_id:<{w[0]}}{', '.join(r.answer):<{w[1]}}"
                     f"{_detected_cell(r):<{w[2]}}{_attack_point_cell(r) + mark:<{w[3]}}")
    lines.append("")
    lines.append(f"{'Process':<9}{'FP (all)':<10}{'OP':<5}{'LT':<5}{'TFP':<5}")
    lines.append("-" * 34)
    for s in report.process_summary():
        fp = f"{s.false_positives}({s.all_duplicates})" if s.false_positives else "0"
        dash = s.false_positives == 0
        cells = ["-" if dash else str(v) for v in (s.op, s.lt, s.tfp)]
        lines.append(f"{s.process_id:<9}{fp:<10}{cells[0]:<5}{cells[1]:<5}{cells[2]:<5}")
    a = report.attribution
    lines.append("")
    lines.append(f"detected {report.detected}/{report.detectable} attacks; attack points "
                 f"{a.first + a.second} ({a.first} first, {a.second} second); "
                 f"incidents TP {report.count(TP)} OP {report.count(OP)} LT {report.count(LT)} "
                 f"TFP {report.count(TFP)} from {report.n_alerts} alerts")
    return "\n".join(lines) + "\n"


def render_report(report: EvaluationReport, out_dir: str | Path | None = None) -> dict[str, str]:
    """CSV tables plus a text summary; written to ``out_dir`` when given."""
    outputs = {
        "attacks.csv": _csv(attacks_table(report)),
        "false_positives.csv": _csv(false_positive_table(report)),
        "fp_summary.csv": _csv(summary_table(report)),
        "report.txt": format_text(report),
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, text in outputs.items():
            (out / name).write_text(text)
    return outputs
