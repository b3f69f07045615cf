"""Offline SFT dataset export with the single-bit acceptance filter.

A session is accepted iff its evaluator reward is exactly 1.0. Each accepted
session becomes one JSON-lines row carrying the instance metadata and the
full multi-turn conversation as OpenAI-style messages (role, content,
tool_calls, tool_call_id), terminated by the final assistant turn. Rejected
sessions can optionally be written to a companion file for verifier or
preference-data pipelines.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field
from typing import Optional

from .model import Json, SessionResult, Trace

log = logging.getLogger(__name__)

INSTANCE_FIELDS = ("instance_id", "repo", "problem_statement", "base_commit", "version")


@dataclass
class ExportSummary:
    attempts: int = 0
    accepted: int = 0
    skipped: int = 0
    per_stratum: dict[str, dict[str, int]] = field(default_factory=dict)

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.attempts if self.attempts else 0.0

    def to_dict(self) -> Json:
        strata = {}
        for key, counts in sorted(self.per_stratum.items()):
            rate = counts["accepted"] / counts["attempts"] if counts["attempts"] else 0.0
            strata[key] = {**counts, "rate": round(rate, 4)}
        return {
            "attempts": self.attempts,
            "accepted": self.accepted,
            "skipped": self.skipped,
            "acceptance_rate": round(self.acceptance_rate, 4),
            "per_stratum": strata,
        }


def _conversation_trace(result: SessionResult) -> Optional[Trace]:
    """Pick the trace holding the session's main conversation.

    The trace with the most messages is the chain that saw the full
    conversation (under per_request that is the final completion; under
    prefix merging it is the main chain).
    """
    if result.trajectory is None or not result.trajectory.traces:
        return None
    return max(
        result.trajectory.traces,
        key=lambda t: (len(t.prompt_messages) + len(t.response_messages)),
    )


def _export_messages(trace: Trace) -> list[Json]:
    messages = []
    for message in list(trace.prompt_messages) + list(trace.response_messages):
        row: Json = {"role": message.get("role", "user"), "content": message.get("content") or ""}
        if message.get("tool_calls"):
            row["tool_calls"] = [
                {
                    "id": c.get("id", ""),
                    "type": "function",
                    "function": {"name": c.get("name", ""), "arguments": c.get("arguments", "")},
                }
                for c in message["tool_calls"]
            ]
        if message.get("tool_call_id"):
            row["tool_call_id"] = message["tool_call_id"]
        messages.append(row)
    while messages and messages[-1]["role"] != "assistant":
        messages.pop()
    return messages


def session_reward(result: SessionResult) -> Optional[float]:
    reward = result.evaluator_report.get("reward")
    return float(reward) if isinstance(reward, (int, float)) else None


def export_row(result: SessionResult) -> Optional[Json]:
    """Build one released-format row, or None (with a warning) if malformed."""
    trace = _conversation_trace(result)
    if trace is None:
        log.warning("session %s accepted but has no trajectory; skipped", result.session_id)
        return None
    metadata = trace.metadata or {}
    missing = [f for f in INSTANCE_FIELDS if f not in metadata]
    if missing:
        log.warning("session %s missing metadata fields %s; skipped", result.session_id, missing)
        return None
    messages = _export_messages(trace)
    if not messages:
        log.warning("session %s has no exportable assistant turn; skipped", result.session_id)
        return None
    row: Json = {f: metadata[f] for f in INSTANCE_FIELDS}
    row["messages"] = messages
    row["session_id"] = result.session_id
    row["task_id"] = result.task_id
    return row


def export_sft_dataset(
    results: list[SessionResult],
    output_path: str,
    rejected_path: Optional[str] = None,
    summary_path: Optional[str] = None,
    stratify_key: str = "repo",
) -> ExportSummary:
    """Write accepted rows as JSON lines; returns (and optionally writes) the summary."""
    summary = ExportSummary()
    accepted_rows: list[Json] = []
    rejected_rows: list[Json] = []
    for result in results:
        summary.attempts += 1
        reward = session_reward(result)
        accepted = reward == 1.0
        trace = _conversation_trace(result)
        stratum = str((trace.metadata if trace else {}).get(stratify_key, "unknown"))
        counts = summary.per_stratum.setdefault(stratum, {"attempts": 0, "accepted": 0})
        counts["attempts"] += 1
        if accepted:
            row = export_row(result)
            if row is None:
                summary.skipped += 1
                continue
            counts["accepted"] += 1
            summary.accepted += 1
            accepted_rows.append(row)
        elif rejected_path is not None:
            rejected_rows.append(
                {
                    "session_id": result.session_id,
                    "task_id": result.task_id,
                    "status": result.status,
                    "reward": reward,
                    "messages": _export_messages(trace) if trace else [],
                }
            )
    _write_jsonl(output_path, accepted_rows)
    if rejected_path is not None:
        _write_jsonl(rejected_path, rejected_rows)
    if summary_path is not None:
        with open(summary_path, "w", encoding="utf-8") as fh:
            json.dump(summary.to_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")
    log.info(
        "exported %d/%d rows (%.1f%% acceptance, %d skipped)",
        summary.accepted,
        summary.attempts,
        100.0 * summary.acceptance_rate,
        summary.skipped,
    )
    return summary


def train_test_split(
    rows: list[Json],
    test_fraction: float = 0.1,
    stratify_key: str = "repo",
    seed: int = 0,
) -> tuple[list[Json], list[Json]]:
    """Stratified split: every stratum is represented in both splits when it can be."""
    by_stratum: dict[str, list[Json]] = {}
    for row in rows:
        by_stratum.setdefault(str(row.get(stratify_key, "unknown")), []).append(row)
    rng = random.Random(seed)
    train: list[Json] = []
    test: list[Json] = []
    for stratum in sorted(by_stratum):
        bucket = list(by_stratum[stratum])
        rng.shuffle(bucket)
        n_test = max(1, round(len(bucket) * test_fraction)) if len(bucket) > 1 else 0
        test.extend(bucket[:n_test])
        train.extend(bucket[n_test:])
    return train, test


def _write_jsonl(path: str, rows: list[Json]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False))
            fh.write("\n")
