"""Dataset forge: plan balanced pairings, generate targets, emit shards.

A plan is a pure function of (initial pairs, pool, balance config, seed).
Execution is bounded-parallel but writes strictly in item order, so shard
bytes are identical at any parallelism and an interrupted run can resume
from the written prefix.
"""

from __future__ import annotations

import json
import math
import os
import threading
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

from . import __version__
from .description_schema import AudioDescription, build_description, serialize_description
from .errors import DestaError, LineError
from .llm_backend import BackendError, DecodingConfig, GenerationBackend
from .prompt_pool import DOMAINS, PromptPool, UnknownDomain, compose_request, sample_prompt
from .seeding import RNG_ALGORITHM, derive64, make_rng

__all__ = [
    "InitialPair",
    "WorkItem",
    "Triplet",
    "BalanceConfig",
    "ForgePlan",
    "load_initial_pairs",
    "build_plan",
    "plan_pairs",
    "run_forge",
    "resume",
    "read_shards",
    "iter_shards",
    "write_shard",
    "read_deadletters",
    "EmptyPlan",
    "ZeroWeight",
    "EmptyDomain",
    "PlanMismatch",
    "SchemaViolation",
    "ForgeLocked",
    "DeadLetterThresholdExceeded",
]

SHARD_PATTERN = "shard-{:05d}.jsonl"
DEADLETTER_NAME = "deadletter.jsonl"
MANIFEST_NAME = "manifest.json"
LOCK_NAME = ".forge.lock"

TRIPLET_FIELDS = (
    "id",
    "audio_path",
    "domain",
    "description",
    "prompt",
    "prompt_id",
    "target",
    "transcript",
    "generator",
    "plan_seed",
)


class EmptyPlan(DestaError):
    pass


class ZeroWeight(DestaError):
    pass


class EmptyDomain(DestaError):
    def __init__(self, domain: str):
        super().__init__(f"balance config references domain {domain!r} with no pairs")
        self.domain = domain


class PlanMismatch(DestaError):
    pass


class SchemaViolation(LineError):
    pass


class ForgeLocked(DestaError):
    pass


class DeadLetterThresholdExceeded(DestaError):
    pass


@dataclass(frozen=True)
class InitialPair:
    id: str
    domain: str
    audio_path: str
    description: AudioDescription
    transcript: str | None = None


@dataclass(frozen=True)
class WorkItem:
    item_index: int
    pair_id: str
    prompt_id: str
    composed_request: str
    seed_lane: int


@dataclass
class Triplet:
    id: str
    audio_path: str
    domain: str
    description: str
    prompt: str
    prompt_id: str
    target: str
    transcript: str | None
    generator: dict
    plan_seed: int
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        obj = {
            "id": self.id,
            "audio_path": self.audio_path,
            "domain": self.domain,
            "description": self.description,
            "prompt": self.prompt,
            "prompt_id": self.prompt_id,
            "target": self.target,
            "generator": self.generator,
            "plan_seed": self.plan_seed,
        }
        if self.transcript is not None:
            obj["transcript"] = self.transcript
        obj.update(self.extra)
        return json.dumps(obj, ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_obj(cls, obj: dict, line_no: int = 0) -> "Triplet":
        required = [f for f in TRIPLET_FIELDS if f not in ("transcript",)]
        missing = [f for f in required if f not in obj]
        if missing:
            raise SchemaViolation(f"triplet record missing fields {missing}", line_no)
        known = set(TRIPLET_FIELDS)
        extra = {k: v for k, v in obj.items() if k not in known}
        return cls(
            id=obj["id"],
            audio_path=obj["audio_path"],
            domain=obj["domain"],
            description=obj["description"],
            prompt=obj["prompt"],
            prompt_id=obj["prompt_id"],
            target=obj["target"],
            transcript=obj.get("transcript"),
            generator=obj["generator"],
            plan_seed=obj["plan_seed"],
            extra=extra,
        )


@dataclass
class BalanceConfig:
    """Per-domain target weights (normalized on construction)."""

    weights: dict[str, float]
    prompts_per_pair: int = 1

    def __post_init__(self):
        if not self.weights:
            raise ZeroWeight("no domain weights configured")
        for domain, w in self.weights.items():
            if domain not in DOMAINS:
                raise UnknownDomain(domain)
            if w <= 0:
                raise ZeroWeight(f"weight for {domain!r} must be positive, got {w}")
        if self.prompts_per_pair < 1:
            raise ValueError("prompts_per_pair must be positive")
        total = sum(self.weights.values())
        self.weights = {d: w / total for d, w in self.weights.items()}


@dataclass
class ForgePlan:
    seed: int
    items: list[WorkItem]
    pairs: dict[str, InitialPair]
    domains: dict[str, str]  # pair_id -> domain (denormalized for counting)
    config: BalanceConfig


def load_initial_pairs(path: str | Path) -> list[InitialPair]:
    """Read the normalized metadata interchange file (JSONL)."""
    pairs = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaViolation(f"invalid JSON: {exc}", line_no) from None
            for key in ("id", "domain", "audio_path", "segments"):
                if key not in obj:
                    raise SchemaViolation(f"missing field {key!r}", line_no)
            pair_id = str(obj["id"])
            domain = str(obj["domain"])
            if domain not in DOMAINS:
                raise SchemaViolation(f"unknown domain {domain!r}", line_no)
            if pair_id in seen:
                raise SchemaViolation(f"duplicate id {pair_id!r}", line_no)
            seen.add(pair_id)
            transcript = obj.get("transcript")
            if transcript is not None and domain != "speech":
                raise SchemaViolation(
                    f"transcript present on non-speech pair {pair_id!r}", line_no
                )
            try:
                description = build_description(obj)
            except DestaError as exc:
                raise SchemaViolation(str(exc), line_no) from None
            if not description.segments:
                raise SchemaViolation("record has no segments", line_no)
            pairs.append(
                InitialPair(pair_id, domain, str(obj["audio_path"]), description, transcript)
            )
    return pairs


def _quotas(counts: dict[str, int], cfg: BalanceConfig) -> dict[str, int]:
    """Largest-remainder apportionment of the total budget across domains.

    Guarantees every realized count is within one item of weight * total.
    """
    total = sum(counts[d] for d in cfg.weights) * cfg.prompts_per_pair
    exact = {d: cfg.weights[d] * total for d in cfg.weights}
    quotas = {d: math.floor(x) for d, x in exact.items()}
    leftover = total - sum(quotas.values())
    by_remainder = sorted(
        cfg.weights, key=lambda d: (-(exact[d] - quotas[d]), d)
    )
    for d in by_remainder[:leftover]:
        quotas[d] += 1
    return quotas


def build_plan(
    initial: list[InitialPair],
    pool: PromptPool,
    cfg: BalanceConfig,
    seed: int,
) -> ForgePlan:
    """Deterministic work plan: balanced pair repetition + prompt draws."""
    by_domain: dict[str, list[InitialPair]] = {}
    for pair in initial:
        by_domain.setdefault(pair.domain, []).append(pair)
    for domain in cfg.weights:
        if not by_domain.get(domain):
            raise EmptyDomain(domain)

    counts = {d: len(by_domain[d]) for d in cfg.weights}
    quotas = _quotas(counts, cfg)

    slots: list[InitialPair] = []
    for domain in sorted(cfg.weights):
        pairs = list(by_domain[domain])
        order = make_rng("forge-shuffle", seed, domain).permutation(len(pairs))
        for k in range(quotas[domain]):
            slots.append(pairs[int(order[k % len(pairs)])])

    # One global shuffle so shards interleave domains; still seed-pure.
    perm = make_rng("forge-order", seed).permutation(len(slots))
    items = []
    pairs_by_id = {p.id: p for p in initial}
    for item_index, slot in enumerate(int(perm[i]) for i in range(len(slots))):
        pair = slots[slot]
        seed_lane = derive64(seed, item_index)
        prompt = sample_prompt(pool, make_rng("forge-prompt", seed_lane), pair.domain)
        request = compose_request(serialize_description(pair.description), prompt.text)
        items.append(WorkItem(item_index, pair.id, prompt.prompt_id, request, seed_lane))
    return ForgePlan(seed, items, pairs_by_id, {p.id: p.domain for p in initial}, cfg)


def plan_pairs(
    initial: list[InitialPair],
    pool: PromptPool,
    cfg: BalanceConfig,
    seed: int,
) -> list[WorkItem]:
    """The planning step alone (see build_plan for the full context)."""
    return build_plan(initial, pool, cfg, seed).items


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------


class _ShardWriter:
    def __init__(self, out_dir: Path, shard_size: int, start_ordinal: int = 0):
        self.out_dir = out_dir
        self.shard_size = shard_size
        self.ordinal = start_ordinal
        self._fh = None
        self._open_index = -1

    def _path(self, index: int) -> Path:
        return self.out_dir / SHARD_PATTERN.format(index)

    def write(self, line: str):
        index = self.ordinal // self.shard_size
        if index != self._open_index:
            self.close()
            mode = "a" if self._path(index).exists() else "w"
            self._fh = open(self._path(index), mode, encoding="utf-8")
            self._open_index = index
        self._fh.write(line + "\n")
        self.ordinal += 1

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None
            self._open_index = -1


def _bounded_ordered_map(fn, items, parallelism: int):
    """Yield fn(item) in input order with a bounded number in flight."""
    if parallelism <= 1:
        for item in items:
            yield fn(item)
        return
    window = max(8, parallelism * 4)
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        pending = deque()
        iterator = iter(items)
        try:
            for item in iterator:
                pending.append(pool.submit(fn, item))
                if len(pending) >= window:
                    yield pending.popleft().result()
            while pending:
                yield pending.popleft().result()
        finally:
            for fut in pending:
                fut.cancel()


def _scan_jsonl(path: Path) -> tuple[int, int]:
    """(complete records, byte length of the complete prefix)."""
    if not path.exists():
        return 0, 0
    count = 0
    good_bytes = 0
    with open(path, "rb") as fh:
        for raw in fh:
            if not raw.endswith(b"\n"):
                break
            try:
                json.loads(raw.decode("utf-8"))
            except (json.JSONDecodeError, UnicodeDecodeError):
                break
            count += 1
            good_bytes += len(raw)
    return count, good_bytes


def _existing_progress(out_dir: Path) -> tuple[int, int, list[tuple[Path, int]]]:
    """Completed (triplets, deadletters) plus truncation points for torn tails."""
    truncations = []
    triplets = 0
    for shard in sorted(out_dir.glob("shard-*.jsonl")):
        count, good = _scan_jsonl(shard)
        triplets += count
        if good != shard.stat().st_size:
            truncations.append((shard, good))
    dead_path = out_dir / DEADLETTER_NAME
    deadletters, good = _scan_jsonl(dead_path)
    if dead_path.exists() and good != dead_path.stat().st_size:
        truncations.append((dead_path, good))
    return triplets, deadletters, truncations


def resume(plan: ForgePlan, out_dir: str | Path) -> list[WorkItem]:
    """Work items not yet covered by a triplet or dead-letter record.

    Read-only: torn trailing lines are ignored here and truncated by
    run_forge(..., resume=True) before writing continues.
    """
    out_dir = Path(out_dir)
    manifest_path = out_dir / MANIFEST_NAME
    if not manifest_path.exists():
        has_artifacts = out_dir.exists() and (
            any(out_dir.glob("shard-*.jsonl")) or (out_dir / DEADLETTER_NAME).exists()
        )
        if has_artifacts:
            raise PlanMismatch(f"{out_dir} holds shards but no manifest; foreign output")
        return list(plan.items)
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("plan_seed") != plan.seed:
        raise PlanMismatch(
            f"output dir was produced with plan_seed={manifest.get('plan_seed')}, "
            f"plan has seed={plan.seed}"
        )
    triplets, deadletters, _ = _existing_progress(out_dir)
    done = triplets + deadletters
    if done > len(plan.items):
        raise PlanMismatch(
            f"{done} records on disk exceed plan size {len(plan.items)}"
        )
    return plan.items[done:]


def _manifest_payload(plan: ForgePlan, backend, decoding, shard_size, threshold, resolved_config):
    planned = {}
    for item in plan.items:
        domain = plan.domains[item.pair_id]
        planned[domain] = planned.get(domain, 0) + 1
    return {
        "plan_seed": plan.seed,
        "total_items": len(plan.items),
        "counts": dict(sorted(planned.items())),
        "model_name": backend.model_name,
        "decoding": asdict(decoding),
        "weights": dict(sorted(plan.config.weights.items())),
        "prompts_per_pair": plan.config.prompts_per_pair,
        "shard_size": shard_size,
        "deadletter_threshold": threshold,
        "rng": RNG_ALGORITHM,
        "tool_version": __version__,
        "resolved_config": resolved_config or {},
    }


def run_forge(
    plan: ForgePlan,
    backend: GenerationBackend,
    decoding: DecodingConfig,
    out_dir: str | Path,
    parallelism: int = 1,
    shard_size: int = 10_000,
    deadletter_threshold: float = 0.01,
    resume_run: bool = False,
    resolved_config: dict | None = None,
) -> dict:
    """Execute the plan; returns the final manifest dict.

    Every item yields exactly one triplet or one dead-letter record. The
    run raises DeadLetterThresholdExceeded when too large a fraction of
    items failed, after all output is on disk.
    """
    if not plan.items:
        raise EmptyPlan("plan has no work items")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    lock_path = out_dir / LOCK_NAME
    try:
        lock_fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ForgeLocked(
            f"{lock_path} exists; another forge owns this directory "
            "(remove the lock if that process is gone)"
        ) from None
    os.write(lock_fd, str(os.getpid()).encode())
    os.close(lock_fd)

    try:
        manifest_path = out_dir / MANIFEST_NAME
        if resume_run:
            remaining = resume(plan, out_dir)
            triplet_count, dead_count, truncations = _existing_progress(out_dir)
            for path, good_bytes in truncations:
                with open(path, "rb+") as fh:
                    fh.truncate(good_bytes)
        else:
            if manifest_path.exists() or any(out_dir.glob("shard-*.jsonl")):
                raise ForgeLocked(
                    f"{out_dir} already holds forge output; pass resume or clean it"
                )
            remaining = plan.items
            triplet_count = dead_count = 0

        manifest = _manifest_payload(
            plan, backend, decoding, shard_size, deadletter_threshold, resolved_config
        )
        manifest_path.write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

        generator_meta = {
            "model_name": backend.model_name,
            "temperature": decoding.temperature,
            "top_p": decoding.top_p,
        }
        desc_cache: dict[str, str] = {}

        def serialized_description(pair: InitialPair) -> str:
            text = desc_cache.get(pair.id)
            if text is None:
                text = serialize_description(pair.description)
                desc_cache[pair.id] = text
            return text

        def work(item: WorkItem):
            try:
                result = backend.generate(item.composed_request, decoding)
                if not result.text:
                    raise BackendError("backend returned an empty target")
                return item, result, None
            except BackendError as exc:
                return item, None, exc

        writer = _ShardWriter(out_dir, shard_size, start_ordinal=triplet_count)
        dead_fh = None
        try:
            for item, result, error in _bounded_ordered_map(work, remaining, parallelism):
                pair = plan.pairs[item.pair_id]
                if error is not None:
                    if dead_fh is None:
                        dead_fh = open(out_dir / DEADLETTER_NAME, "a", encoding="utf-8")
                    dead_fh.write(
                        json.dumps(
                            {
                                "item_index": item.item_index,
                                "pair_id": item.pair_id,
                                "prompt_id": item.prompt_id,
                                "error": type(error).__name__,
                                "message": str(error),
                            },
                            ensure_ascii=False,
                            sort_keys=True,
                        )
                        + "\n"
                    )
                    dead_count += 1
                    continue
                desc_text = serialized_description(pair)
                prompt_text = item.composed_request[len(desc_text) + 1 :]
                triplet = Triplet(
                    id=f"{plan.seed:016x}-{item.item_index:08d}",
                    audio_path=pair.audio_path,
                    domain=pair.domain,
                    description=desc_text,
                    prompt=prompt_text,
                    prompt_id=item.prompt_id,
                    target=result.text,
                    transcript=pair.transcript,
                    generator=generator_meta,
                    plan_seed=plan.seed,
                )
                writer.write(triplet.to_json())
                triplet_count += 1
        finally:
            writer.close()
            if dead_fh is not None:
                dead_fh.close()

        manifest["realized"] = {
            "triplets": triplet_count,
            "deadletters": dead_count,
        }
        manifest_path.write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        if dead_count / len(plan.items) > deadletter_threshold:
            raise DeadLetterThresholdExceeded(
                f"{dead_count}/{len(plan.items)} items dead-lettered, "
                f"threshold {deadletter_threshold}"
            )
        return manifest
    finally:
        lock_path.unlink(missing_ok=True)


# ---------------------------------------------------------------------------
# Shard IO
# ---------------------------------------------------------------------------


def iter_shards(path: str | Path):
    """Stream triplets from a shard file or a directory of shards."""
    path = Path(path)
    files = [path] if path.is_file() else sorted(path.glob("shard-*.jsonl"))
    for file in files:
        with open(file, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise SchemaViolation(f"invalid JSON in {file.name}: {exc}", line_no) from None
                yield Triplet.from_obj(obj, line_no)


def read_shards(path: str | Path) -> list[Triplet]:
    return list(iter_shards(path))


def write_shard(triplets: list[Triplet], path: str | Path):
    with open(path, "w", encoding="utf-8") as fh:
        for triplet in triplets:
            fh.write(triplet.to_json() + "\n")


def read_deadletters(out_dir: str | Path) -> list[dict]:
    path = Path(out_dir) / DEADLETTER_NAME
    if not path.exists():
        return []
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(json.loads(line))
    return records
