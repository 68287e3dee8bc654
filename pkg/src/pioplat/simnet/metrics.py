"""Simulation outputs: per-message receipts, summaries and file export."""
from __future__ import annotations

import csv
import json
import statistics
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from ..core import BLOCK, TX
from ..peering import percentile


@dataclass
class MessageInfo:
    hash_hex: str
    kind: str
    created_at: int
    number: Optional[int] = None


@dataclass
class MetricsReport:
    observers: List[str] = field(default_factory=list)
    messages: Dict[str, MessageInfo] = field(default_factory=dict)
    receipts: Dict[str, Dict[str, int]] = field(default_factory=dict)
    churn: Dict[str, List[int]] = field(default_factory=dict)
    race: List[dict] = field(default_factory=list)
    counters: Dict[str, int] = field(default_factory=dict)
    # seq numbers of first receipts, for tie-breaking equal timestamps
    receipt_seq: Dict[str, Dict[str, int]] = field(default_factory=dict)

    def latencies(self, observer: str, kind: str) -> List[int]:
        got = self.receipts.get(observer, {})
        return [got[h] - m.created_at for h, m in self.messages.items()
                if m.kind == kind and h in got]

    def median_latency(self, observer: str, kind: str = BLOCK) -> Optional[float]:
        xs = self.latencies(observer, kind)
        return statistics.median(xs) if xs else None

    def fraction_first(self, observed: str, control: str, kind: str = TX) -> Optional[float]:
        """Share of messages ``observed`` got strictly before ``control``.

        Only messages that at least one of the two received count; a message
        the control never got counts as a win when ``observed`` has it.
        """
        a = self.receipts.get(observed, {})
        b = self.receipts.get(control, {})
        total = wins = 0
        for h, m in self.messages.items():
            if m.kind != kind or (h not in a and h not in b):
                continue
            total += 1
            if h in a and (h not in b or a[h] < b[h]):
                wins += 1
        return wins / total if total else None

    def mean_diff(self, observed: str, control: str, kind: str = TX) -> Optional[float]:
        """Mean of control receipt minus observed receipt over common messages."""
        a = self.receipts.get(observed, {})
        b = self.receipts.get(control, {})
        diffs = [b[h] - a[h] for h, m in self.messages.items() if m.kind == kind and h in a and h in b]
        return statistics.fmean(diffs) if diffs else None

    def race_wins(self) -> Dict[str, int]:
        out = {"relay": 0, "baseline": 0}
        for r in self.race:
            out[r["winner"]] += 1
        return out

    def summary(self) -> dict:
        out = {"messages": {BLOCK: 0, TX: 0}, "observers": {}}
        for m in self.messages.values():
            out["messages"][m.kind] += 1
        for obs in self.observers:
            entry = {}
            for kind in (BLOCK, TX):
                entry[kind] = describe(self.latencies(obs, kind))
                entry[kind]["lost"] = out["messages"][kind] - entry[kind]["count"]
            out["observers"][obs] = entry
        if len(self.observers) >= 2:
            a, b = self.observers[0], self.observers[1]
            out["fraction_first"] = {k: self.fraction_first(a, b, k) for k in (BLOCK, TX)}
            out["tx_diff_mean_ms"] = self.mean_diff(a, b, TX)
        if self.race:
            out["race"] = self.race_wins()
        out["churn"] = {k: sum(v) for k, v in sorted(self.churn.items())}
        out["counters"] = dict(sorted(self.counters.items()))
        return out

    def rows(self):
        for h, m in self.messages.items():
            for obs in self.observers:
                t = self.receipts.get(obs, {}).get(h)
                yield (h, m.kind, m.number if m.number is not None else "", m.created_at, obs,
                       "" if t is None else t, "" if t is None else t - m.created_at,
                       int(t is None))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["hash", "kind", "number", "created_at_ms", "observer", "received_at_ms",
                        "latency_ms", "lost"])
            w.writerows(self.rows())

    def write_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.summary(), f, indent=2, sort_keys=True)
            f.write("\n")


def describe(xs: List[float]) -> dict:
    if not xs:
        return {"count": 0, "median": None, "mean": None, "p10": None, "p90": None}
    return {"count": len(xs), "median": statistics.median(xs), "mean": statistics.fmean(xs),
            "p10": percentile(xs, 10), "p90": percentile(xs, 90)}


def aggregate(summaries: List[dict]) -> dict:
    """Combine per-seed summaries: per-observer medians of the seed medians, etc."""
    out: dict = {"runs": len(summaries)}
    if not summaries:
        return out
    observers = summaries[0]["observers"].keys()
    out["observers"] = {}
    for obs in observers:
        entry = {}
        for kind in (BLOCK, TX):
            meds = [s["observers"][obs][kind]["median"] for s in summaries
                    if s["observers"][obs][kind]["median"] is not None]
            entry[kind] = {"median_of_medians": statistics.median(meds) if meds else None,
                           "seed_medians": meds}
        out["observers"][obs] = entry
    ff = [s["fraction_first"][TX] for s in summaries if s.get("fraction_first", {}).get(TX) is not None]
    if ff:
        out["fraction_first_tx_mean"] = statistics.fmean(ff)
    races = [s["race"] for s in summaries if "race" in s]
    if races:
        out["race"] = {k: sum(r[k] for r in races) for k in races[0]}
    return out
