"""Run orchestration: screen, evaluate, convert, report.

Screening appends one JSONL record per completed (note, question, pathway)
unit, so an interrupted run resumes by skipping keys already on disk.
Completion order under the thread pool is nondeterministic; downstream
consumers (and the determinism check) sort by key via canonicalization.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Mapping

from . import __version__
from .corpus import (
    AdmissionNote,
    Catalog,
    Verdict,
    load_catalog_dir,
    load_gold,
    load_notes,
)
from .errors import (
    ConfigError,
    EligoError,
    GatewayError,
    MissingVerdictError,
)
from .evaluation import (
    counterfactual_rate,
    grounding_check,
    render_report,
    score_criteria,
    score_questions,
    timing_stats,
)
from .gateway import BackendConfig, Gateway, ParsedAnswer, backend_config_from_dict
from .pathway_a import ROLE_IDS, answer_with_role, load_roles, majority_vote, RoleAnswer
from .pathway_b import run_debate
from .rules import criterion_verdict, trial_verdict

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_PARTIAL = 4

VOTE_LABEL = "A-vote"
DEBATE_LABEL = "B"

# Volatile per-record fields excluded from determinism comparisons.
VOLATILE_FIELDS = ("elapsed_s", "timestamp")


@dataclass
class RunConfig:
    backend: BackendConfig
    notes_path: str
    catalog_dir: str
    out_dir: str
    pathway: str = "both"  # "A" | "B" | "both"
    roles: tuple[str, ...] = ("crc", "jd", "ie")
    vote: bool = True
    gold_path: str | None = None
    seed: str | None = None  # fixture selection label for the mock backend
    prompts_dir: str | None = None
    workers: int = 8

    def validate(self) -> None:
        if self.pathway not in ("A", "B", "both"):
            raise ConfigError(f"pathway must be A, B or both, got {self.pathway!r}")
        for role in self.roles:
            if role.upper() not in ROLE_IDS:
                raise ConfigError(f"unknown role {role!r}; expected crc, jd, ie")
        if len(set(role.upper() for role in self.roles)) != len(self.roles):
            raise ConfigError("duplicate roles in config")
        if self.pathway in ("A", "both"):
            if not self.roles:
                raise ConfigError("pathway A requires at least one role")
            if self.vote and len(self.roles) != len(ROLE_IDS):
                raise ConfigError("vote=true requires all three roles (crc, jd, ie)")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        try:
            self.backend.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_dict(cls, record: Mapping) -> "RunConfig":
        try:
            backend = backend_config_from_dict(record["backend"])
            config = cls(
                backend=backend,
                notes_path=record["notes"],
                catalog_dir=record["catalog"],
                out_dir=record["out"],
                pathway=record.get("pathway", "both"),
                roles=tuple(record.get("roles", ["crc", "jd", "ie"])),
                vote=bool(record.get("vote", True)),
                gold_path=record.get("gold"),
                seed=record.get("seed"),
                prompts_dir=record.get("prompts"),
                workers=int(record.get("workers", 8)),
            )
        except KeyError as exc:
            raise ConfigError(f"run config is missing key {exc.args[0]!r}") from exc
        config.validate()
        return config

    def digest(self) -> str:
        payload = {
            "backend": {
                "kind": self.backend.kind,
                "model_name": self.backend.model_name,
                "base_url": self.backend.base_url,
            },
            "pathway": self.pathway,
            "roles": list(self.roles),
            "vote": self.vote,
            "notes": self.notes_path,
            "catalog": self.catalog_dir,
            "seed": self.seed,
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def role_labels(self) -> list[str]:
        if self.pathway == "B":
            return []
        return [f"A-{role.upper()}" for role in self.roles]

    def unit_labels(self) -> list[str]:
        labels = self.role_labels()
        if self.pathway in ("A", "both") and self.vote:
            labels.append(VOTE_LABEL)
        if self.pathway in ("B", "both"):
            labels.append(DEBATE_LABEL)
        return labels


@dataclass
class ResultRecord:
    note_id: str
    question_id: str
    pathway: str  # unit label, e.g. "A-CRC", "A-vote", "B"
    answer: ParsedAnswer
    elapsed_s: float
    transcript: str | None = None

    def to_dict(self) -> dict:
        record = {
            "note_id": self.note_id,
            "question_id": self.question_id,
            "pathway": self.pathway,
            **self.answer.to_dict(),
            "elapsed_s": self.elapsed_s,
        }
        if self.transcript is not None:
            record["transcript"] = self.transcript
        return record

    @classmethod
    def from_dict(cls, record: Mapping) -> "ResultRecord":
        answer = ParsedAnswer(
            value=Verdict(record["value"]),
            rationale=record.get("rationale", ""),
            evidence=tuple(record.get("evidence", [])),
            provenance=record.get("provenance", ""),
            parse_fallback=bool(record.get("parse_fallback", False)),
        )
        return cls(
            note_id=record["note_id"],
            question_id=record["question_id"],
            pathway=record["pathway"],
            answer=answer,
            elapsed_s=float(record.get("elapsed_s", 0.0)),
            transcript=record.get("transcript"),
        )

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.note_id, self.question_id, self.pathway)


class _JsonlWriter:
    """Serializes appends so each record lands as one complete line."""

    def __init__(self, path: Path):
        self.path = path
        self._lock = threading.Lock()

    def append(self, record: dict) -> None:
        line = json.dumps(record, ensure_ascii=False, sort_keys=True)
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as handle:
                handle.write(line + "\n")


def read_results(path: str | Path) -> list[ResultRecord]:
    """Load result records from a completed (or partial but clean) run."""
    records: list[ResultRecord] = []
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                records.append(ResultRecord.from_dict(json.loads(line)))
    return records


def _read_resume_state(path: Path) -> list[ResultRecord]:
    """Like read_results, but repairs a torn (half-written) final line.

    The torn line is truncated away so later appends land on a clean file.
    """
    if not path.exists():
        return []
    raw = path.read_text(encoding="utf-8")
    lines = raw.splitlines(keepends=True)
    records: list[ResultRecord] = []
    for index, line in enumerate(lines):
        stripped = line.strip()
        if not stripped:
            continue
        try:
            records.append(ResultRecord.from_dict(json.loads(stripped)))
        except (json.JSONDecodeError, KeyError, ValueError):
            if index == len(lines) - 1:
                log.warning("truncating torn final line of %s", path)
                path.write_text("".join(lines[:index]), encoding="utf-8")
                break
            raise
    return records


def canonicalize_records(records: Iterable[Mapping]) -> str:
    """Strip volatile fields, sort by key, render stable JSONL text."""
    cleaned = []
    for record in records:
        kept = {k: v for k, v in record.items() if k not in VOLATILE_FIELDS}
        cleaned.append(kept)
    cleaned.sort(key=lambda r: (r.get("note_id", ""), r.get("question_id", ""),
                                r.get("pathway", "")))
    return "".join(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n" for r in cleaned)


def canonicalize_results_file(path: str | Path) -> str:
    with open(path, "r", encoding="utf-8") as handle:
        records = [json.loads(line) for line in handle if line.strip()]
    return canonicalize_records(records)


# -- screening ----------------------------------------------------------------

def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def cmd_screen(config: RunConfig, gateway: Gateway | None = None) -> int:
    """Answer every (note, question) unit, resumably, then roll up verdicts.

    A pre-built gateway may be injected (tests use this to script failures);
    by default one is constructed from the configured backend.
    """
    try:
        config.validate()
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG

    try:
        notes = load_notes(config.notes_path)
        catalog = load_catalog_dir(config.catalog_dir)
    except (EligoError, OSError) as exc:
        log.error("input error: %s", exc)
        return EXIT_INPUT

    started_at = _utc_now()
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results_path = out_dir / "results.jsonl"
    debates_path = out_dir / "debates.jsonl"

    existing = {record.key: record for record in _read_resume_state(results_path)}
    writer = _JsonlWriter(results_path)
    debate_writer = _JsonlWriter(debates_path)

    if gateway is None:
        gateway = Gateway(config.backend, seed=config.seed)
    roles = load_roles(config.prompts_dir)
    questions = list(catalog.questions.values())
    labels = config.unit_labels()
    total_units = len(notes) * len(questions) * len(labels)

    answered = 0
    failed = 0
    skipped = 0
    count_lock = threading.Lock()
    new_records: dict[tuple[str, str, str], ResultRecord] = {}

    def persist(record: ResultRecord) -> None:
        nonlocal answered
        writer.append(record.to_dict())
        with count_lock:
            answered += 1
            new_records[record.key] = record

    def run_role_unit(note: AdmissionNote, question, role_id: str) -> None:
        nonlocal failed
        label = f"A-{role_id}"
        try:
            role_answer = answer_with_role(question, note, roles[role_id], gateway)
            persist(ResultRecord(
                note_id=note.note_id,
                question_id=question.question_id,
                pathway=label,
                answer=role_answer.answer,
                elapsed_s=role_answer.elapsed_ms / 1000.0,
            ))
        except GatewayError as exc:
            log.error("unit %s|%s|%s failed: %s", note.note_id, question.question_id,
                      label, exc)
            with count_lock:
                failed += 1

    def run_debate_unit(note: AdmissionNote, question) -> None:
        nonlocal failed
        try:
            started = time.monotonic()
            outcome, transcript = run_debate(
                question, note, gateway, prompts_dir=config.prompts_dir
            )
            elapsed = time.monotonic() - started
            debate_writer.append({
                "note_id": note.note_id,
                "question_id": question.question_id,
                **transcript.to_dict(),
            })
            persist(ResultRecord(
                note_id=note.note_id,
                question_id=question.question_id,
                pathway=DEBATE_LABEL,
                answer=outcome,
                elapsed_s=elapsed,
                transcript=f"debates.jsonl:{note.note_id}|{question.question_id}",
            ))
        except GatewayError as exc:
            log.error("unit %s|%s|B failed: %s", note.note_id, question.question_id, exc)
            with count_lock:
                failed += 1

    tasks = []
    role_ids_enabled = [role.upper() for role in config.roles] if config.pathway != "B" else []
    for note in notes:
        for question in questions:
            for role_id in role_ids_enabled:
                key = (note.note_id, question.question_id, f"A-{role_id}")
                if key in existing:
                    skipped += 1
                else:
                    tasks.append(("role", note, question, role_id))
            if config.pathway in ("B", "both"):
                key = (note.note_id, question.question_id, DEBATE_LABEL)
                if key in existing:
                    skipped += 1
                else:
                    tasks.append(("debate", note, question, None))

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        futures = []
        for kind, note, question, role_id in tasks:
            if kind == "role":
                futures.append(pool.submit(run_role_unit, note, question, role_id))
            else:
                futures.append(pool.submit(run_debate_unit, note, question))
        for future in as_completed(futures):
            future.result()  # propagate unexpected (non-gateway) errors

    # Vote records are pure aggregation over the three role records, which
    # may come from this run or from a resumed file.
    if config.pathway in ("A", "both") and config.vote:
        for note in notes:
            for question in questions:
                key = (note.note_id, question.question_id, VOTE_LABEL)
                if key in existing:
                    skipped += 1
                    continue
                members = []
                for role_id in ROLE_IDS:
                    role_key = (note.note_id, question.question_id, f"A-{role_id}")
                    record = new_records.get(role_key) or existing.get(role_key)
                    if record is None:
                        break
                    members.append(RoleAnswer(
                        answer=record.answer, role_id=role_id,
                        elapsed_ms=record.elapsed_s * 1000.0,
                    ))
                if len(members) != 3:
                    failed += 1
                    continue
                voted = majority_vote(*members)
                persist(ResultRecord(
                    note_id=note.note_id,
                    question_id=question.question_id,
                    pathway=VOTE_LABEL,
                    answer=voted,
                    elapsed_s=max(member.elapsed_ms for member in members) / 1000.0,
                ))

    _write_verdicts(out_dir / "verdicts.jsonl", notes, catalog,
                    list(existing.values()) + list(new_records.values()))

    manifest = {
        "schema": "eligo-manifest-v1",
        "config_digest": config.digest(),
        "engine_version": __version__,
        "backend": f"{config.backend.kind}:{config.backend.model_name}",
        "started_at": started_at,
        "finished_at": _utc_now(),
        "counts": {
            "notes": len(notes),
            "questions": len(questions),
            "unit_labels": labels,
            "total_units": total_units,
            "answered": answered,
            "failed": failed,
            "skipped": skipped,
        },
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return EXIT_PARTIAL if failed else EXIT_OK


def _write_verdicts(path: Path, notes, catalog: Catalog,
                    records: list[ResultRecord]) -> None:
    """Derive criterion and trial verdicts per answer stream; rewrite wholesale."""
    by_label: dict[str, dict[tuple[str, str], Verdict]] = {}
    for record in records:
        by_label.setdefault(record.pathway, {})[
            (record.note_id, record.question_id)
        ] = record.answer.value

    scorable = [criterion for criterion in catalog.criteria.values()
                if criterion.rule_text]
    skipped_criteria = [criterion.criterion_id for criterion in
                        catalog.criteria.values() if not criterion.rule_text]
    if skipped_criteria:
        log.warning("criteria without rules skipped in verdicts: %s", skipped_criteria)

    lines: list[str] = []
    for label in sorted(by_label):
        answers_by_key = by_label[label]
        for note in notes:
            answers = {
                question_id: value
                for (note_id, question_id), value in answers_by_key.items()
                if note_id == note.note_id
            }
            verdicts = []
            for criterion in scorable:
                verdict = criterion_verdict(criterion, answers)
                verdicts.append(verdict)
                lines.append(json.dumps({
                    "note_id": note.note_id,
                    "criterion_id": criterion.criterion_id,
                    "met": verdict.met,
                    "stable": verdict.stable,
                    "pathway": label,
                }, ensure_ascii=False, sort_keys=True))
            for trial in catalog.trials.values():
                try:
                    rollup = trial_verdict(trial, verdicts)
                except MissingVerdictError as exc:
                    log.warning("trial %s skipped for %s: %s",
                                trial.trial_id, note.note_id, exc)
                    continue
                lines.append(json.dumps({
                    "note_id": note.note_id,
                    "trial_id": trial.trial_id,
                    "status": rollup.status.value,
                    "failing": list(rollup.failing),
                    "pathway": label,
                }, ensure_ascii=False, sort_keys=True))
    temp = path.with_suffix(".tmp")
    temp.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    temp.replace(path)


# -- evaluation ---------------------------------------------------------------

def cmd_evaluate(
    results_path: str | Path,
    gold_path: str | Path,
    catalog_dir: str | Path,
    out_dir: str | Path,
    *,
    notes_path: str | Path | None = None,
    positive_class: str = "YES",
) -> int:
    """Score a results file against gold; write metrics.json, report.md, CSV."""
    try:
        catalog = load_catalog_dir(catalog_dir)
        gold = load_gold(gold_path)
        records = read_results(results_path)
        notes = load_notes(notes_path) if notes_path else None
    except (EligoError, OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        log.error("input error: %s", exc)
        return EXIT_INPUT

    for record in records:
        if record.question_id not in catalog.questions:
            log.error("results reference unknown question id %r", record.question_id)
            return EXIT_INPUT
    for _, question_id in gold.question_labels:
        if question_id not in catalog.questions:
            log.error("gold references unknown question id %r", question_id)
            return EXIT_INPUT
    for _, criterion_id in gold.criterion_labels:
        if criterion_id not in catalog.criteria:
            log.error("gold references unknown criterion id %r", criterion_id)
            return EXIT_INPUT
    if notes is not None:
        known_notes = {note.note_id for note in notes}
        for record in records:
            if record.note_id not in known_notes:
                log.error("results reference unknown note id %r", record.note_id)
                return EXIT_INPUT
        for note_id, _ in list(gold.question_labels) + list(gold.criterion_labels):
            if note_id not in known_notes:
                log.error("gold references unknown note id %r", note_id)
                return EXIT_INPUT

    notes_by_id = {note.note_id: note for note in notes} if notes is not None else None

    by_label: dict[str, dict[tuple[str, str], ParsedAnswer]] = {}
    timing_records: list[tuple[str, float]] = []
    for record in records:
        by_label.setdefault(record.pathway, {})[
            (record.note_id, record.question_id)
        ] = record.answer
        timing_records.append((record.pathway, record.elapsed_s))

    try:
        positive = Verdict(positive_class)
    except ValueError:
        log.error("positive class must be YES, NO or UNKNOWN, got %r", positive_class)
        return EXIT_INPUT

    question_level: dict[str, dict] = {}
    criterion_level: dict[str, dict] = {}
    scorable = [criterion for criterion in catalog.criteria.values()
                if criterion.rule_text]
    try:
        for label, predictions in sorted(by_label.items()):
            scored = {key: answer for key, answer in predictions.items()
                      if key in gold.question_labels}
            report = score_questions(scored, gold, catalog, positive_class=positive)
            if notes_by_id is not None:
                report.counterfactual = counterfactual_rate(scored, gold, notes_by_id)
            document = report.to_dict()
            document["unscored_count"] = len(predictions) - len(scored)
            question_level[label] = document

            if gold.criterion_labels:
                verdicts = {}
                note_ids = {note_id for note_id, _ in predictions}
                for note_id in sorted(note_ids):
                    answers = {question_id: answer.value
                               for (n, question_id), answer in predictions.items()
                               if n == note_id}
                    for criterion in scorable:
                        key = (note_id, criterion.criterion_id)
                        if key in gold.criterion_labels:
                            verdicts[key] = criterion_verdict(criterion, answers)
                criterion_level[label] = score_criteria(verdicts, gold).to_dict()
    except KeyError as exc:
        log.error("scoring error: %s", exc)
        return EXIT_INPUT

    metrics = {
        "schema": "eligo-metrics-v1",
        "question_level": question_level,
        "criterion_level": criterion_level,
        "timing": {label: stats.to_dict()
                   for label, stats in timing_stats(timing_records).items()},
    }

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.json").write_text(
        json.dumps(metrics, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    (out_dir / "report.md").write_text(render_report(metrics), encoding="utf-8")

    with open(out_dir / "per_question.csv", "w", encoding="utf-8", newline="") as handle:
        fields = ["note_id", "question_id", "gold", "predicted", "grounding",
                  "elapsed_s", "pathway"]
        writer = csv.DictWriter(handle, fieldnames=fields)
        writer.writeheader()
        for record in sorted(records, key=lambda r: r.key):
            gold_label = gold.question_labels.get((record.note_id, record.question_id))
            grounding = ""
            if notes_by_id is not None:
                note = notes_by_id.get(record.note_id)
                if note is not None:
                    grounding = grounding_check(record.answer, note).value
            writer.writerow({
                "note_id": record.note_id,
                "question_id": record.question_id,
                "gold": gold_label.value if gold_label else "",
                "predicted": record.answer.value.value,
                "grounding": grounding,
                "elapsed_s": f"{record.elapsed_s:.6f}",
                "pathway": record.pathway,
            })
    return EXIT_OK


# -- conversion ---------------------------------------------------------------

def cmd_convert(
    criteria_path: str | Path,
    backends_path: str | Path,
    out_dir: str | Path,
    *,
    prompts_dir: str | Path | None = None,
) -> int:
    """Convert every criterion; write questions.json, criteria.json, report."""
    from .conversion import convert_criterion
    from .corpus import load_criteria, write_criteria, write_questions
    from .errors import ConversionError, RefinementParseError

    try:
        with open(backends_path, "r", encoding="utf-8") as handle:
            backend_doc = json.load(handle)
        drafters = [Gateway(backend_config_from_dict(entry))
                    for entry in backend_doc["backends"]]
        refiner = Gateway(backend_config_from_dict(backend_doc["refiner"]))
        if not drafters:
            raise ConfigError("backends.json lists no drafting backends")
    except (ConfigError, KeyError, json.JSONDecodeError, OSError) as exc:
        log.error("backend config error: %s", exc)
        return EXIT_CONFIG

    try:
        criteria = load_criteria(criteria_path)
    except (EligoError, OSError, KeyError) as exc:
        log.error("input error: %s", exc)
        return EXIT_INPUT

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    all_questions = []
    updated_criteria = []
    report_lines = ["# Conversion report", ""]
    failures = 0
    for criterion in criteria.values():
        try:
            merged, updated, warnings = convert_criterion(
                criterion, drafters, refiner, prompts_dir=prompts_dir
            )
        except (ConversionError, RefinementParseError, ValueError, EligoError) as exc:
            failures += 1
            updated_criteria.append(criterion)
            report_lines.append(f"## {criterion.criterion_id}: FAILED")
            report_lines.append(f"- {exc}")
            report_lines.append("")
            continue
        all_questions.extend(merged.questions)
        updated_criteria.append(updated)
        report_lines.append(
            f"## {criterion.criterion_id}: {len(merged.questions)} questions"
        )
        report_lines.append(f"- rule: {merged.rule_text or '(needs human authoring)'}")
        for warning in warnings:
            report_lines.append(f"- warning: {warning}")
        report_lines.append("")

    write_questions(out_dir / "questions.json", all_questions)
    write_criteria(out_dir / "criteria.json", updated_criteria)
    (out_dir / "conversion_report.md").write_text(
        "\n".join(report_lines).rstrip() + "\n", encoding="utf-8"
    )
    return EXIT_PARTIAL if failures else EXIT_OK


# -- report -------------------------------------------------------------------

def cmd_report(metrics_path: str | Path, out_path: str | Path | None = None) -> int:
    """Render an existing metrics.json to Markdown without recomputation."""
    try:
        with open(metrics_path, "r", encoding="utf-8") as handle:
            metrics = json.load(handle)
    except (OSError, json.JSONDecodeError) as exc:
        log.error("cannot read metrics: %s", exc)
        return EXIT_INPUT
    rendered = render_report(metrics)
    if out_path is not None:
        Path(out_path).write_text(rendered, encoding="utf-8")
    print(rendered, end="")
    return EXIT_OK
