"""
Tracker - SQLite 运行记录与运行清单 (manifest)
"""

import hashlib
import json
import logging
import sqlite3
from importlib import metadata
from pathlib import Path
from typing import Dict, List, Mapping, Optional

logger = logging.getLogger(__name__)

MANIFEST_PACKAGES = (
    "knowledge-composition-sampling",
    "torch",
    "transformers",
    "numpy",
    "scikit-learn",
    "rank-bm25",
    "networkx",
    "nltk",
)


class RunTracker:
    """SQLite 运行追踪：每次子命令一条 run，逐项失败记入 failures"""

    def __init__(self, db_path: str = "kcs_runs.db"):
        self.db_path = db_path
        self._init_db()

    def _connect(self) -> sqlite3.Connection:
        return sqlite3.connect(self.db_path)

    def _init_db(self):
        conn = self._connect()
        conn.executescript("""
            CREATE TABLE IF NOT EXISTS runs (
                id INTEGER PRIMARY KEY,
                command TEXT,
                config_hash TEXT,
                seed INTEGER,
                output TEXT,
                status TEXT DEFAULT 'running',
                summary TEXT,  -- JSON
                created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
            );

            CREATE TABLE IF NOT EXISTS failures (
                id INTEGER PRIMARY KEY,
                run_id INTEGER,
                item TEXT,
                error TEXT,
                FOREIGN KEY (run_id) REFERENCES runs(id)
            );
        """)
        conn.commit()
        conn.close()

    def start_run(self, command: str, config_hash: str, seed: int, output: str = None) -> int:
        conn = self._connect()
        cursor = conn.execute(
            "INSERT INTO runs (command, config_hash, seed, output) VALUES (?, ?, ?, ?)",
            (command, config_hash, seed, output),
        )
        conn.commit()
        run_id = cursor.lastrowid
        conn.close()
        logger.debug(f"记录运行 #{run_id}: {command}")
        return run_id

    def finish_run(self, run_id: int, status: str, summary: Optional[Dict] = None):
        conn = self._connect()
        conn.execute(
            "UPDATE runs SET status = ?, summary = ? WHERE id = ?",
            (status, json.dumps(summary or {}, ensure_ascii=False, sort_keys=True), run_id),
        )
        conn.commit()
        conn.close()

    def record_failure(self, run_id: int, item: str, error: str):
        conn = self._connect()
        conn.execute(
            "INSERT INTO failures (run_id, item, error) VALUES (?, ?, ?)",
            (run_id, item, error),
        )
        conn.commit()
        conn.close()

    def get_run(self, run_id: int) -> Optional[Dict]:
        conn = self._connect()
        row = conn.execute(
            "SELECT id, command, config_hash, seed, output, status, summary FROM runs WHERE id = ?",
            (run_id,),
        ).fetchone()
        conn.close()
        if not row:
            return None
        keys = ("id", "command", "config_hash", "seed", "output", "status", "summary")
        run = dict(zip(keys, row))
        run["summary"] = json.loads(run["summary"]) if run["summary"] else {}
        return run

    def failures(self, run_id: int) -> List[Dict]:
        conn = self._connect()
        rows = conn.execute(
            "SELECT item, error FROM failures WHERE run_id = ? ORDER BY id", (run_id,)
        ).fetchall()
        conn.close()
        return [{"item": item, "error": error} for item, error in rows]


def file_sha256(path: Path) -> str:
    """文件内容哈希；目录按相对路径排序后逐文件哈希"""
    path = Path(path)
    digest = hashlib.sha256()
    files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    for file in files:
        if path.is_dir():
            digest.update(file.relative_to(path).as_posix().encode("utf-8"))
        with file.open("rb") as f:
            for chunk in iter(lambda: f.read(1 << 20), b""):
                digest.update(chunk)
    return digest.hexdigest()


def package_versions() -> Dict[str, Optional[str]]:
    versions = {}
    for name in MANIFEST_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = None
    return versions


def manifest_path(output: Path) -> Path:
    output = Path(output)
    return output.with_name(f"{output.name}.manifest.json")


def write_manifest(
    output: Path,
    command: str,
    config: Mapping,
    config_hash: str,
    inputs: Mapping[str, Optional[str]],
    seed: int,
) -> Path:
    """
    写出 <output>.manifest.json

    内容只取决于配置、输入文件内容、包版本和种子（不含时间戳）。
    """
    record = {
        "command": command,
        "config": config,
        "config_hash": config_hash,
        "inputs": {
            name: file_sha256(Path(p)) for name, p in sorted(inputs.items()) if p is not None
        },
        "versions": package_versions(),
        "seed": seed,
    }
    path = manifest_path(output)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(record, ensure_ascii=False, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return path
