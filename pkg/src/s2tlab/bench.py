"""Decoding cost comparison: MACs per token, peak live elements, tokens/s, parameter counts."""
from __future__ import annotations

import csv
import hashlib
import io
import time
from dataclasses import asdict, dataclass
from pathlib import Path

from .decode import DecodeConfig, beam_search
from .models import S2TModel
from .synthdata import Dataset
from .tensor import ContractError, CostCounters, measure, no_grad
from .train import banned_ids, prefix_for

FIELDS = ("label", "params", "macs_per_token", "peak_live_elements", "tokens_per_second", "set_digest")


@dataclass
class BenchReport:
    label: str
    params: int
    macs_per_token: float
    peak_live_elements: int
    tokens_per_second: float
    set_digest: str


def set_digest(dataset: Dataset, dcfg: DecodeConfig) -> str:
    """Identity of a benchmark set: example seeds/tasks, data parameters and decode settings."""
    h = hashlib.sha256()
    h.update(repr(sorted(dataset.params.to_dict().items())).encode())
    h.update(repr(sorted(asdict(dcfg).items())).encode())
    for ex in dataset:
        h.update(f"{ex.seed}:{ex.task};".encode())
    return h.hexdigest()[:16]


def run_bench(model: S2TModel, dataset: Dataset, dcfg: DecodeConfig, label: str) -> BenchReport:
    """Beam-decode every example one at a time and aggregate the cost counters.

    Everything from feature input to the final token is included: front-end,
    encoder or prefix computation, and all decoding steps.  Only tensors
    created during decoding count toward live elements; weights do not.
    """
    if len(dataset) == 0:
        raise ContractError("empty benchmark set")
    model.eval()
    ban = banned_ids(dataset.params.vocab)
    counters = CostCounters()
    tokens = 0
    t0 = time.perf_counter()
    with no_grad(), measure(counters):
        for ex in dataset:
            sess = model.session(ex.features[None], [ex.feature_len], ban)
            hyp = beam_search(sess, prefix_for(ex, dataset.params.vocab), dcfg,
                              dcfg.max_len_for_frames(ex.feature_len))
            tokens += len(hyp.tokens)
            del sess
    wall = time.perf_counter() - t0
    return BenchReport(label, model.num_params(), counters.macs / tokens, int(counters.peak_live_elements),
                       tokens / wall if wall > 0 else float("inf"), set_digest(dataset, dcfg))


def write_reports(path, reports: list[BenchReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FIELDS)
        for r in reports:
            w.writerow([r.label, r.params, repr(r.macs_per_token), r.peak_live_elements,
                        repr(r.tokens_per_second), r.set_digest])


def read_reports(path) -> list[BenchReport]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and tuple(rows[0]) != FIELDS:
        raise ContractError(f"{path}: unexpected header {tuple(rows[0])}")
    return [BenchReport(r["label"], int(r["params"]), float(r["macs_per_token"]),
                        int(r["peak_live_elements"]), float(r["tokens_per_second"]), r["set_digest"])
            for r in rows]


@dataclass
class RatioRow:
    label: str
    params: int
    speed_ratio: float       # tokens/s relative to baseline (wall clock)
    mac_speed_ratio: float   # baseline MACs/token over this MACs/token (deterministic)
    memory_ratio: float      # peak live elements relative to baseline


def compare_reports(reports: list[BenchReport], baseline_label: str) -> list[RatioRow]:
    base = [r for r in reports if r.label == baseline_label]
    if not base:
        raise ContractError(f"baseline {baseline_label!r} not among {[r.label for r in reports]}")
    b = base[0]
    digests = {r.set_digest for r in reports}
    if len(digests) > 1:
        raise ContractError(f"reports come from different benchmark sets: {sorted(digests)}")
    return [RatioRow(r.label, r.params, r.tokens_per_second / b.tokens_per_second,
                     b.macs_per_token / r.macs_per_token, r.peak_live_elements / b.peak_live_elements)
            for r in reports]


def markdown_table(rows: list[RatioRow]) -> str:
    head = ["model", "params", "speed (tok/s)", "speed (MACs)", "memory"]
    body = [[r.label, str(r.params), f"{r.speed_ratio:.2f}", f"{r.mac_speed_ratio:.2f}", f"{r.memory_ratio:.2f}"]
            for r in rows]
    widths = [max(len(x) for x in col) for col in zip(head, *body)]

    def line(cells):
        return "| " + " | ".join(c.ljust(w) for c, w in zip(cells, widths)) + " |"

    out = io.StringIO()
    out.write(line(head) + "\n")
    out.write("|" + "|".join("-" * (w + 2) for w in widths) + "|\n")
    for cells in body:
        out.write(line(cells) + "\n")
    return out.getvalue()
