import json

from rollout_gateway.export import export_sft_dataset, train_test_split
from rollout_gateway.model import LogprobEntry, SessionResult, Trace, Trajectory


def make_result(session_id, reward, repo="org/repo", with_tool_call=False, with_metadata=True):
    metadata = {"session_id": session_id, "task_id": "t", "builder": "prefix_merging", "harness": "mock_agent"}
    if with_metadata:
        metadata.update(
            {
                "instance_id": f"inst-{session_id}",
                "repo": repo,
                "problem_statement": "fix it",
                "base_commit": "abc123",
                "version": "1.0",
            }
        )
    response_messages = []
    if with_tool_call:
        response_messages.append(
            {
                "role": "assistant",
                "content": "",
                "tool_calls": [{"id": "call_1", "name": "ls", "arguments": "{}"}],
            }
        )
        response_messages.append({"role": "tool", "tool_call_id": "call_1", "content": "a.txt"})
    response_messages.append({"role": "assistant", "content": "final patch"})
    trace = Trace(
        prompt_ids=[1],
        response_ids=[2],
        loss_mask=[1],
        response_logprobs=[LogprobEntry(token_id=2, logprob=-0.1)],
        prompt_messages=[
            {"role": "system", "content": "agent"},
            {"role": "user", "content": "task"},
        ],
        response_messages=response_messages,
        tools=None,
        finish_reason="stop",
        metadata=metadata,
    )
    return SessionResult(
        session_id=session_id,
        task_id="t",
        status="completed" if reward == 1.0 else "error",
        trajectory=Trajectory(session_id=session_id, traces=[trace], builder_name="prefix_merging"),
        evaluator_report={"reward": reward, "evaluator": "test_on_output", "detail": {}},
    )


def batch_three_of_ten():
    results = []
    for i in range(10):
        reward = 1.0 if i < 3 else 0.0
        repo = "org/alpha" if i % 2 == 0 else "org/beta"
        results.append(make_result(f"s{i}", reward, repo=repo))
    return results


class TestExport:
    def test_single_bit_filter_three_of_ten(self, tmp_path):
        out = tmp_path / "rows.jsonl"
        summary = export_sft_dataset(batch_three_of_ten(), str(out), summary_path=str(tmp_path / "summary.json"))
        rows = [json.loads(line) for line in out.read_text().splitlines()]
        assert len(rows) == 3
        assert summary.attempts == 10
        assert summary.accepted == 3
        assert summary.acceptance_rate == 0.3
        written = json.loads((tmp_path / "summary.json").read_text())
        assert written["acceptance_rate"] == 0.3
        assert written["attempts"] == 10

    def test_row_schema(self, tmp_path):
        out = tmp_path / "rows.jsonl"
        export_sft_dataset([make_result("s0", 1.0, with_tool_call=True)], str(out))
        row = json.loads(out.read_text().splitlines()[0])
        for field in ("instance_id", "repo", "problem_statement", "base_commit", "version", "messages"):
            assert field in row
        roles = [m["role"] for m in row["messages"]]
        assert roles[-1] == "assistant"
        tool_turns = [m for m in row["messages"] if m["role"] == "tool"]
        assert tool_turns and all("tool_call_id" in m for m in tool_turns)
        call_turns = [m for m in row["messages"] if m.get("tool_calls")]
        assert call_turns
        call = call_turns[0]["tool_calls"][0]
        assert call["type"] == "function" and "arguments" in call["function"]

    def test_zero_accepted_writes_empty_file_and_summary(self, tmp_path):
        out = tmp_path / "rows.jsonl"
        summary = export_sft_dataset(
            [make_result("s0", 0.0), make_result("s1", 0.0)],
            str(out),
            summary_path=str(tmp_path / "summary.json"),
        )
        assert out.read_text() == ""
        assert summary.accepted == 0
        assert (tmp_path / "summary.json").exists()

    def test_missing_metadata_rows_are_skipped_and_counted(self, tmp_path):
        out = tmp_path / "rows.jsonl"
        summary = export_sft_dataset(
            [make_result("s0", 1.0, with_metadata=False), make_result("s1", 1.0)], str(out)
        )
        rows = out.read_text().splitlines()
        assert len(rows) == 1
        assert summary.skipped == 1
        assert summary.accepted == 1

    def test_rejected_companion_file(self, tmp_path):
        out = tmp_path / "rows.jsonl"
        rej = tmp_path / "rejected.jsonl"
        export_sft_dataset(batch_three_of_ten(), str(out), rejected_path=str(rej))
        rejected = [json.loads(line) for line in rej.read_text().splitlines()]
        assert len(rejected) == 7
        assert all(r["reward"] != 1.0 for r in rejected)

    def test_export_soundness(self, tmp_path):
        results = batch_three_of_ten()
        out = tmp_path / "rows.jsonl"
        export_sft_dataset(results, str(out))
        rows = [json.loads(line) for line in out.read_text().splitlines()]
        accepted_ids = {r.session_id for r in results if r.evaluator_report["reward"] == 1.0}
        assert {row["session_id"] for row in rows} == accepted_ids
        assert len(rows) <= len(results)

    def test_per_stratum_counts(self, tmp_path):
        out = tmp_path / "rows.jsonl"
        summary = export_sft_dataset(batch_three_of_ten(), str(out))
        assert summary.per_stratum["org/alpha"]["attempts"] == 5
        assert summary.per_stratum["org/beta"]["attempts"] == 5
        assert summary.per_stratum["org/alpha"]["accepted"] == 2  # s0, s2
        assert summary.per_stratum["org/beta"]["accepted"] == 1  # s1


class TestSplit:
    def test_stratified_split_represents_every_stratum(self):
        rows = [{"repo": "a", "n": i} for i in range(20)] + [{"repo": "b", "n": i} for i in range(10)]
        train, test = train_test_split(rows, test_fraction=0.1, stratify_key="repo", seed=1)
        assert len(train) + len(test) == 30
        assert {r["repo"] for r in test} == {"a", "b"}
        assert {r["repo"] for r in train} == {"a", "b"}

    def test_split_is_deterministic_for_a_seed(self):
        rows = [{"repo": "a", "n": i} for i in range(10)]
        assert train_test_split(rows, seed=7) == train_test_split(rows, seed=7)

    def test_singleton_stratum_stays_in_train(self):
        rows = [{"repo": "solo", "n": 0}] + [{"repo": "big", "n": i} for i in range(9)]
        train, test = train_test_split(rows, test_fraction=0.2, seed=0)
        assert any(r["repo"] == "solo" for r in train)
        assert not any(r["repo"] == "solo" for r in test)
