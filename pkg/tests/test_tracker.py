import json

from src.tracker import RunTracker, file_sha256, manifest_path, write_manifest


def test_run_lifecycle(tmp_path):
    tracker = RunTracker(str(tmp_path / "runs.db"))
    run_id = tracker.start_run("sample", "abc123", seed=7, output="out.jsonl")
    tracker.record_failure(run_id, "s1#2", "GenerationError: empty")
    tracker.finish_run(run_id, "completed", {"records": 9})

    run = tracker.get_run(run_id)
    assert run["command"] == "sample"
    assert run["status"] == "completed"
    assert run["seed"] == 7
    assert run["summary"] == {"records": 9}
    assert tracker.failures(run_id) == [{"item": "s1#2", "error": "GenerationError: empty"}]
    assert tracker.get_run(run_id + 1) is None


def test_database_survives_reopen(tmp_path):
    db = str(tmp_path / "runs.db")
    run_id = RunTracker(db).start_run("train", "h", seed=1)
    assert RunTracker(db).get_run(run_id)["status"] == "running"


def test_directory_hash_covers_names_and_content(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "a" / "x.txt").write_text("one", encoding="utf-8")
    first = file_sha256(tmp_path / "a")
    (tmp_path / "a" / "x.txt").write_text("two", encoding="utf-8")
    assert file_sha256(tmp_path / "a") != first


def test_manifest_is_deterministic(tmp_path):
    data = tmp_path / "data.jsonl"
    data.write_text('{"id": 1}\n', encoding="utf-8")
    out = tmp_path / "out.jsonl"
    kwargs = dict(
        command="sample",
        config={"seed": 3},
        config_hash="h",
        inputs={"data": str(data), "checkpoint": None},
        seed=3,
    )
    path = write_manifest(out, **kwargs)
    first = path.read_bytes()
    assert write_manifest(out, **kwargs).read_bytes() == first
    assert path == manifest_path(out) == tmp_path / "out.jsonl.manifest.json"

    manifest = json.loads(first)
    assert set(manifest["inputs"]) == {"data"}
    assert manifest["inputs"]["data"] == file_sha256(data)
    assert "torch" in manifest["versions"]
