"""Trajectory builders: convert a captured completion session into trainer samples.

Two registry-backed strategies:

* ``per_request`` - every captured completion becomes one trace with an
  all-ones loss mask. Lossless per call, but a long agent session fragments
  into many short samples.

* ``prefix_merging`` - completions whose prompts extend each other as strict
  token prefixes are grouped into append-only chains and merged into one
  trace per chain. Sampled assistant tokens are copied verbatim (mask 1,
  captured logprobs); the canonical tokens between one assistant turn and the
  next generation prompt are copied from the later prompt (mask 0, synthetic
  logprob entries). Compaction, subagents, and parallel branches fail the
  prefix check and naturally open new chains.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from typing import Callable, Optional

from .model import (
    CompletionRecord,
    CompletionSession,
    Json,
    LogprobEntry,
    Trace,
    Trajectory,
)

log = logging.getLogger(__name__)

CHAIN_BREAK = "chain_break"


class BuilderResolutionError(KeyError):
    """Unknown builder strategy name."""


@dataclass(frozen=True)
class Chain:
    """An ordered subset of completions forming one append-only conversation."""

    completion_indices: list[int]
    grouping_key: str
    last_prompt: list[int]


def is_strict_prefix(p_prev: list[int], p_next: list[int]) -> bool:
    """True iff p_prev is a proper elementwise prefix of p_next."""
    return len(p_next) > len(p_prev) and p_next[: len(p_prev)] == p_prev


def _normalize_ws(text: str) -> str:
    return " ".join(text.split())


def grouping_key(record: CompletionRecord) -> str:
    """Message-level key identifying candidate continuations of one conversation.

    Built from the whitespace-normalized first system and first user message
    plus the sorted tool names: stable across the turns of one conversation,
    distinct across subagents with different system prompts. Replaceable if a
    harness needs a different notion of conversation identity.
    """
    first_system = ""
    first_user = ""
    for message in record.request_messages:
        role = message.get("role")
        if role == "system" and not first_system:
            first_system = _normalize_ws(str(message.get("content") or ""))
        elif role == "user" and not first_user:
            first_user = _normalize_ws(str(message.get("content") or ""))
        if first_system and first_user:
            break
    tool_names = sorted(t.get("name", "") for t in record.tools or [])
    h = hashlib.sha256()
    for piece in (first_system, first_user, *tool_names):
        h.update(piece.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()


def extract_interstitial(a_m: list[int], tail: list[int], end_of_turn: int) -> Optional[list[int]]:
    """Cut the non-sampled interstitial out of the canonical tail.

    The tail is everything the next prompt appends after the previous prompt.
    Its first end-of-turn token marks where the canonical rendering of the
    previous assistant turn closes. If the sampled response already ended
    with end-of-turn, the interstitial starts after that token; otherwise it
    starts at it, so the assistant turn is still closed before the next
    prompt context. A tail with no end-of-turn token signals a chain break
    (returns None): we never fabricate a turn boundary.
    """
    try:
        cut = tail.index(end_of_turn)
    except ValueError:
        return None
    if a_m and a_m[-1] == end_of_turn:
        return tail[cut + 1 :]
    return tail[cut:]


@dataclass
class _OpenChain:
    indices: list[int]
    key: str
    last_prompt: list[int]
    extendable: bool
    last_extended_at: int  # order counter for the tie-break


def group_into_chains(session: CompletionSession, config: Json) -> list[Chain]:
    """Partition completions into ordered chains of strict-prefix continuations.

    A completion joins an existing chain only when the grouping key matches,
    the strict prefix relation holds against the chain's last prompt, and the
    appended tail contains the end-of-turn token. Among multiple candidates
    the longest last prompt wins (most specific continuation), tie-broken by
    most recent extension. Everything else opens a new chain, including
    completions with empty sampled responses, which stay as length-1 chains.
    """
    end_of_turn = int(config["end_of_turn_token_id"])
    chains: list[_OpenChain] = []
    counter = 0
    for index, record in enumerate(session.completions):
        counter += 1
        prompt = list(record.prompt_token_ids)
        key = grouping_key(record)
        if not record.response_token_ids:
            chains.append(_OpenChain([index], key, prompt, extendable=False, last_extended_at=counter))
            continue
        best: Optional[_OpenChain] = None
        for chain in chains:
            if not chain.extendable or chain.key != key:
                continue
            if not is_strict_prefix(chain.last_prompt, prompt):
                continue
            tail = prompt[len(chain.last_prompt) :]
            if end_of_turn not in tail:
                continue  # chain break: reassign to a new chain
            if (
                best is None
                or len(chain.last_prompt) > len(best.last_prompt)
                or (len(chain.last_prompt) == len(best.last_prompt) and chain.last_extended_at > best.last_extended_at)
            ):
                best = chain
        if best is None:
            chains.append(_OpenChain([index], key, prompt, extendable=True, last_extended_at=counter))
        else:
            best.indices.append(index)
            best.last_prompt = prompt
            best.last_extended_at = counter
    return [Chain(c.indices, c.key, c.last_prompt) for c in chains]


def _base_metadata(session: CompletionSession, builder_name: str, context: Optional[Json]) -> Json:
    context = context or {}
    metadata: Json = dict(context.get("metadata") or {})
    metadata.update(
        {
            "session_id": session.session_id,
            "task_id": context.get("task_id", ""),
            "builder": builder_name,
            "harness": context.get("harness", ""),
        }
    )
    return metadata


def build_per_request(session: CompletionSession, config: Optional[Json] = None, context: Optional[Json] = None) -> Trajectory:
    """One trace per completion, copied verbatim, mask all ones."""
    traces = []
    for record in session.completions:
        metadata = _base_metadata(session, "per_request", context)
        metadata["chain_index"] = record.seq
        traces.append(
            Trace(
                prompt_ids=list(record.prompt_token_ids),
                response_ids=list(record.response_token_ids),
                loss_mask=[1] * len(record.response_token_ids),
                response_logprobs=list(record.response_logprobs),
                prompt_messages=list(record.request_messages),
                response_messages=list(record.response_messages),
                tools=record.tools,
                finish_reason=record.finish_reason,
                metadata=metadata,
            )
        )
    return Trajectory(
        session_id=session.session_id,
        traces=traces,
        builder_name="per_request",
        build_diagnostics={"completions": len(session.completions), "chains": len(traces), "dropped_completions": 0},
    )


def _new_request_messages(prev: CompletionRecord, current: CompletionRecord) -> list[Json]:
    """Interstitial messages the harness added between two adjacent completions.

    The next request normally replays the previous request, echoes the
    assistant reply, then appends new user/tool messages; skip the replay and
    the echo so accumulated response messages stay deduplicated.
    """
    start = len(prev.request_messages) + len(prev.response_messages)
    return list(current.request_messages[start:])


def build_prefix_merging(session: CompletionSession, config: Json, context: Optional[Json] = None) -> Trajectory:
    """Merge each append-only chain into a single trace.

    The chain's first prompt becomes the trace prompt; the response is the
    alternation of sampled assistant segments and canonical interstitials,
    with the loss mask marking exactly the sampled tokens.
    """
    end_of_turn = int(config["end_of_turn_token_id"])
    chains = group_into_chains(session, config)
    records = session.completions
    traces = []
    for chain_index, chain in enumerate(chains):
        members = [records[i] for i in chain.completion_indices]
        first = members[0]
        response_ids: list[int] = []
        loss_mask: list[int] = []
        logprobs: list[LogprobEntry] = []
        response_messages: list[Json] = []
        for m, record in enumerate(members):
            response_ids.extend(record.response_token_ids)
            loss_mask.extend([1] * len(record.response_token_ids))
            logprobs.extend(record.response_logprobs)
            if m > 0:
                response_messages.extend(_new_request_messages(members[m - 1], record))
            response_messages.extend(record.response_messages)
            if m + 1 < len(members):
                nxt = members[m + 1]
                tail = list(nxt.prompt_token_ids[len(record.prompt_token_ids) :])
                interstitial = extract_interstitial(list(record.response_token_ids), tail, end_of_turn)
                if interstitial is None:
                    # group_into_chains only admits continuations whose tail
                    # carries the end-of-turn token, so this cannot happen.
                    raise AssertionError("chain admitted a continuation without an end-of-turn token")
                response_ids.extend(interstitial)
                loss_mask.extend([0] * len(interstitial))
                logprobs.extend(LogprobEntry(token_id=t, logprob=0.0, synthetic=True) for t in interstitial)
        metadata = _base_metadata(session, "prefix_merging", context)
        metadata["chain_index"] = chain_index
        traces.append(
            Trace(
                prompt_ids=list(first.prompt_token_ids),
                response_ids=response_ids,
                loss_mask=loss_mask,
                response_logprobs=logprobs,
                prompt_messages=list(first.request_messages),
                response_messages=response_messages,
                tools=first.tools,
                finish_reason=members[-1].finish_reason,
                metadata=metadata,
            )
        )
    return Trajectory(
        session_id=session.session_id,
        traces=traces,
        builder_name="prefix_merging",
        build_diagnostics={
            "completions": len(records),
            "chains": len(chains),
            "dropped_completions": 0,
        },
    )


BuilderFn = Callable[[CompletionSession, Json, Optional[Json]], Trajectory]

_REGISTRY: dict[str, BuilderFn] = {}


def register_builder(name: str, builder: BuilderFn) -> None:
    _REGISTRY[name] = builder


def resolve_builder(name: str) -> BuilderFn:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise BuilderResolutionError(f"no trajectory builder named {name!r}") from None


def is_registered(name: str) -> bool:
    return name in _REGISTRY


def build(strategy: str, session: CompletionSession, config: Optional[Json] = None, context: Optional[Json] = None) -> Trajectory:
    return resolve_builder(strategy)(session, config or {}, context)


register_builder("per_request", lambda session, config, context=None: build_per_request(session, config, context))
register_builder("prefix_merging", lambda session, config, context=None: build_prefix_merging(session, config, context))
