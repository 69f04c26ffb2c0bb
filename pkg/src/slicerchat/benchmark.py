"""Benchmark harness: run a question set across model/RAG arms and score it.

Runs are sequential on purpose so per-run latency is not polluted by
neighbours. Scores come from the fraction of generated code lines a reviewer
marked as working, mapped onto a 0..5 integer scale.
"""

from __future__ import annotations

import csv
import json
import logging
import re
import time
import uuid
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import httpx

logger = logging.getLogger(__name__)

_FENCE_RE = re.compile(r"^```")
_CODE_LINE_RES = (
    re.compile(r"^\s*(import|from)\s+\w"),           # imports
    re.compile(r"^\s*(def|class)\s+\w"),             # definitions
    re.compile(r"^\s*[A-Za-z_][\w.\[\]'\"]*\s*=[^=]"),  # assignment, not ==
    re.compile(r"^\s*[A-Za-z_][\w.]*\("),            # bare call
)


@dataclass
class BenchmarkCase:
    id: str
    question: str
    notes: str | None = None


@dataclass
class ArmConfig:
    label: str
    model: str
    rag: dict[str, bool]


@dataclass
class BenchmarkResult:
    case_id: str
    arm: str
    model: str
    inference_seconds: float
    output: str
    prompt_tokens: int
    output_tokens: int
    lines_total: int
    lines_ok: int | None = None
    score: int | None = None
    note: str = ""
    backend_seconds: float = 0.0  # from the eos stats; not a CSV column


@dataclass
class ReviewEntry:
    case_id: str
    arm: str
    lines_ok: int
    comment: str = ""


@dataclass
class CodeExtraction:
    blocks: list[str]
    used_heuristic: bool = False
    unterminated: bool = False


def default_cases_path() -> Path:
    return Path(str(resources.files("slicerchat").joinpath("data/cases.jsonl")))


def default_arms_path() -> Path:
    return Path(str(resources.files("slicerchat").joinpath("data/arms.json")))


def load_cases(path: str | Path) -> list[BenchmarkCase]:
    path = Path(path)
    cases: list[BenchmarkCase] = []
    seen: set[str] = set()
    with path.open(encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: line {lineno}: invalid JSON: {exc}") from exc
            case_id = obj.get("id")
            question = obj.get("question")
            if not case_id or not question:
                raise ValueError(f"{path}: line {lineno}: id and question are required")
            if case_id in seen:
                raise ValueError(f"{path}: line {lineno}: duplicate case id {case_id!r}")
            seen.add(case_id)
            cases.append(BenchmarkCase(id=case_id, question=question, notes=obj.get("notes")))
    return cases


def load_arms(path: str | Path) -> list[ArmConfig]:
    path = Path(path)
    data = json.loads(path.read_text(encoding="utf-8"))
    if not isinstance(data, list):
        raise ValueError(f"{path}: expected a JSON list of arms")
    arms: list[ArmConfig] = []
    seen: set[str] = set()
    for i, obj in enumerate(data):
        label = obj.get("label")
        model = obj.get("model")
        if not label or not model:
            raise ValueError(f"{path}: arm {i}: label and model are required")
        if label in seen:
            raise ValueError(f"{path}: arm {i}: duplicate label {label!r}")
        seen.add(label)
        arms.append(ArmConfig(label=label, model=model, rag=dict(obj.get("rag", {}))))
    return arms


def load_review(path: str | Path) -> list[ReviewEntry]:
    path = Path(path)
    entries: list[ReviewEntry] = []
    with path.open(encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: line {lineno}: invalid JSON: {exc}") from exc
            try:
                entries.append(
                    ReviewEntry(
                        case_id=obj["case_id"],
                        arm=obj["arm"],
                        lines_ok=int(obj["lines_ok"]),
                        comment=str(obj.get("comment", "")),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}: line {lineno}: bad review entry: {exc}") from exc
    return entries


def extract_code(output: str) -> CodeExtraction:
    """Pull code out of fenced blocks, falling back to a line heuristic.

    An unterminated fence runs to the end of the output; when no fences exist
    at all, lines that look like code (imports, definitions, assignments,
    calls) form a single block and the extraction is flagged as heuristic.
    """
    lines = output.split("\n")
    blocks: list[str] = []
    in_fence = False
    current: list[str] = []
    saw_fence = False
    for line in lines:
        if _FENCE_RE.match(line.strip()):
            saw_fence = True
            if in_fence:
                blocks.append("\n".join(current))
                current = []
                in_fence = False
            else:
                in_fence = True
            continue
        if in_fence:
            current.append(line)
    unterminated = in_fence
    if in_fence:
        blocks.append("\n".join(current))
    if saw_fence:
        return CodeExtraction(blocks=blocks, unterminated=unterminated)

    code_lines = [
        line for line in lines if any(rx.match(line) for rx in _CODE_LINE_RES)
    ]
    if not code_lines:
        return CodeExtraction(blocks=[])
    return CodeExtraction(blocks=["\n".join(code_lines)], used_heuristic=True)


def extract_code_blocks(output: str) -> list[str]:
    return extract_code(output).blocks


def count_code_lines(blocks: list[str]) -> int:
    """Non-empty, non-comment lines across all blocks."""
    total = 0
    for block in blocks:
        for line in block.split("\n"):
            stripped = line.strip()
            if stripped and not stripped.startswith("#"):
                total += 1
    return total


def score_from_line_fraction(lines_ok: int, lines_total: int) -> int:
    """Map the working-line fraction onto 0..5, rounding halves up."""
    if lines_ok < 0 or lines_total < 0:
        raise ValueError("line counts must be non-negative")
    if lines_ok > lines_total:
        raise ValueError(f"lines_ok ({lines_ok}) exceeds lines_total ({lines_total})")
    if lines_total == 0:
        return 0
    return (10 * lines_ok + lines_total) // (2 * lines_total)


def run_benchmark(
    cases: list[BenchmarkCase],
    arms: list[ArmConfig],
    endpoint: str,
    timeout: float = 120.0,
) -> list[BenchmarkResult]:
    """Run every case under every arm against a live chat endpoint.

    inference_seconds is wall time from sending the request to receiving the
    eos event. A service error still produces a result (score 0, noted) so
    the grid stays complete.
    """
    if not cases or not arms:
        raise ValueError("cases and arms must both be non-empty")
    endpoint = endpoint.rstrip("/")
    results: list[BenchmarkResult] = []
    with httpx.Client(timeout=timeout) as client:
        for case in cases:
            for arm in arms:
                results.append(_run_one(client, endpoint, case, arm))
    return results


def _run_one(
    client: httpx.Client, endpoint: str, case: BenchmarkCase, arm: ArmConfig
) -> BenchmarkResult:
    body = {
        "session_id": f"bench-{uuid.uuid4().hex}",
        "prompt": case.question,
        "rag": arm.rag,
        "model": arm.model,
    }
    pieces: list[str] = []
    stats: dict = {}
    error: str | None = None
    t0 = time.perf_counter()
    t_end = t0
    try:
        with client.stream("POST", f"{endpoint}/api/chat", json=body) as resp:
            resp.raise_for_status()
            for line in resp.iter_lines():
                if not line.strip():
                    continue
                event = json.loads(line)
                if event["type"] == "token":
                    pieces.append(event["text"])
                elif event["type"] == "eos":
                    stats = event["stats"]
                    t_end = time.perf_counter()
                elif event["type"] == "error":
                    error = event["message"]
                    t_end = time.perf_counter()
    except (httpx.HTTPError, json.JSONDecodeError, KeyError) as exc:
        error = f"transport failure: {exc}"
        t_end = time.perf_counter()

    output = "".join(pieces)
    if error is not None:
        logger.warning("case %s / arm %s failed: %s", case.id, arm.label, error)
        return BenchmarkResult(
            case_id=case.id,
            arm=arm.label,
            model=arm.model,
            inference_seconds=t_end - t0,
            output=output,
            prompt_tokens=int(stats.get("prompt_tokens", 0)),
            output_tokens=int(stats.get("output_tokens", 0)),
            lines_total=0,
            lines_ok=0,
            score=0,
            note=f"error: {error}",
            backend_seconds=float(stats.get("backend_seconds", 0.0)),
        )

    extraction = extract_code(output)
    notes = []
    if extraction.used_heuristic:
        notes.append("heuristic code extraction")
    if extraction.unterminated:
        notes.append("unterminated code fence")
    return BenchmarkResult(
        case_id=case.id,
        arm=arm.label,
        model=arm.model,
        inference_seconds=t_end - t0,
        output=output,
        prompt_tokens=int(stats.get("prompt_tokens", 0)),
        output_tokens=int(stats.get("output_tokens", 0)),
        lines_total=count_code_lines(extraction.blocks),
        note="; ".join(notes),
        backend_seconds=float(stats.get("backend_seconds", 0.0)),
    )


def review_results(
    results: list[BenchmarkResult], entries: list[ReviewEntry]
) -> list[BenchmarkResult]:
    """Merge reviewer line counts into results and recompute scores in place."""
    by_key = {(r.case_id, r.arm): r for r in results}
    for entry in entries:
        result = by_key.get((entry.case_id, entry.arm))
        if result is None:
            raise ValueError(
                f"review entry for unknown run: case {entry.case_id!r}, arm {entry.arm!r}"
            )
        if not 0 <= entry.lines_ok <= result.lines_total:
            raise ValueError(
                f"review entry for case {entry.case_id!r}, arm {entry.arm!r}: "
                f"lines_ok {entry.lines_ok} outside [0, {result.lines_total}]"
            )
        result.lines_ok = entry.lines_ok
        result.score = score_from_line_fraction(entry.lines_ok, result.lines_total)
        if entry.comment:
            result.note = f"{result.note}; {entry.comment}" if result.note else entry.comment
    return results


_CSV_COLUMNS = [
    "case_id",
    "arm",
    "model",
    "inference_seconds",
    "prompt_tokens",
    "output_tokens",
    "lines_total",
    "lines_ok",
    "score",
    "note",
]


def emit_report(results: list[BenchmarkResult], out_dir: str | Path) -> list[Path]:
    """Write results.csv, results.jsonl (verbatim outputs) and summary.json."""
    if not results:
        raise ValueError("no results to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    csv_path = out_dir / "results.csv"
    with csv_path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(_CSV_COLUMNS)
        for r in results:
            writer.writerow(
                [
                    r.case_id,
                    r.arm,
                    r.model,
                    repr(r.inference_seconds),
                    r.prompt_tokens,
                    r.output_tokens,
                    r.lines_total,
                    "" if r.lines_ok is None else r.lines_ok,
                    "" if r.score is None else r.score,
                    r.note,
                ]
            )

    jsonl_path = out_dir / "results.jsonl"
    with jsonl_path.open("w", encoding="utf-8") as f:
        for r in results:
            f.write(json.dumps(r.__dict__, sort_keys=True) + "\n")

    case_ids = list(dict.fromkeys(r.case_id for r in results))
    arm_labels = list(dict.fromkeys(r.arm for r in results))
    by_key = {(r.case_id, r.arm): r for r in results}
    score_matrix = [
        [_cell(by_key, c, a, "score") for a in arm_labels] for c in case_ids
    ]
    time_matrix = [
        [_cell(by_key, c, a, "inference_seconds") for a in arm_labels] for c in case_ids
    ]
    summary = {
        "cases": case_ids,
        "arms": arm_labels,
        "score": score_matrix,
        "inference_seconds": time_matrix,
    }
    summary_path = out_dir / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return [csv_path, jsonl_path, summary_path]


def _cell(by_key: dict, case_id: str, arm: str, attr: str):
    result = by_key.get((case_id, arm))
    return None if result is None else getattr(result, attr)


def read_results_csv(path: str | Path) -> list[BenchmarkResult]:
    """Parse a results.csv back into results (outputs are not in the CSV)."""
    path = Path(path)
    results: list[BenchmarkResult] = []
    with path.open(encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        for row in reader:
            results.append(
                BenchmarkResult(
                    case_id=row["case_id"],
                    arm=row["arm"],
                    model=row["model"],
                    inference_seconds=float(row["inference_seconds"]),
                    output="",
                    prompt_tokens=int(row["prompt_tokens"]),
                    output_tokens=int(row["output_tokens"]),
                    lines_total=int(row["lines_total"]),
                    lines_ok=int(row["lines_ok"]) if row["lines_ok"] != "" else None,
                    score=int(row["score"]) if row["score"] != "" else None,
                    note=row["note"],
                )
            )
    return results
