import json

from src.harness import RunRecord
from src.store import STORE_NAME, ResultsStore


def _record(seed, status="ok", acc=0.5, config_hash="0123456789abcdef"):
    return RunRecord(
        config_hash=config_hash,
        seed=seed,
        status=status,
        final_test_accuracy=acc,
        started_at="2026-01-01T00:00:00+00:00",
        labels={"tau": 2.0, "lambda_policy": "constant(0.5)", "bits": 2, "width_factor": 1.0, "baseline": False},
    )


def test_append_and_reopen(tmp_path):
    store = ResultsStore.in_dir(tmp_path)
    assert len(store) == 0
    store.append(_record(1))
    store.append(_record(2))
    assert store.path == tmp_path / STORE_NAME
    assert store.has("0123456789abcdef", 1)
    assert not store.has("0123456789abcdef", 3)

    reopened = ResultsStore.in_dir(tmp_path)
    assert len(reopened) == 2
    assert reopened.get("0123456789abcdef", 2).final_test_accuracy == 0.5
    lines = (tmp_path / STORE_NAME).read_text(encoding="utf-8").splitlines()
    assert [json.loads(line)["seed"] for line in lines] == [1, 2]


def test_later_line_wins(tmp_path):
    store = ResultsStore.in_dir(tmp_path)
    store.append(_record(1, acc=0.1))
    store.append(_record(1, acc=0.9))
    assert ResultsStore.in_dir(tmp_path).get("0123456789abcdef", 1).final_test_accuracy == 0.9
    assert len(ResultsStore.in_dir(tmp_path)) == 1


def test_truncated_trailing_line_is_skipped_and_repaired(tmp_path, capsys):
    store = ResultsStore.in_dir(tmp_path)
    store.append(_record(1))
    with store.path.open("a", encoding="utf-8") as fh:
        fh.write('{"config_hash": "0123456789abcdef", "seed": 2, "sta')

    reopened = ResultsStore.in_dir(tmp_path)
    assert len(reopened) == 1
    assert reopened.skipped_lines == 1
    assert "[store] skip-line" in capsys.readouterr().out

    reopened.append(_record(3))
    final = ResultsStore.in_dir(tmp_path)
    assert final.has("0123456789abcdef", 1) and final.has("0123456789abcdef", 3)
    assert final.skipped_lines == 1


def test_lines_missing_required_fields_are_skipped(tmp_path):
    path = tmp_path / STORE_NAME
    path.write_text('{"seed": 1}\n[1, 2]\n\n', encoding="utf-8")
    store = ResultsStore(path)
    assert len(store) == 0
    assert store.skipped_lines == 2
