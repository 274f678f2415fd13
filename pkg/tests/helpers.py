"""Shared test utilities: random vocabulary-valid facts and tiny images."""

from __future__ import annotations

import io
import json
import random

from PIL import Image

from chartdesc.model import (
    DEGREES,
    DISTRIBUTION_STATES,
    RELATIONS,
    TREND_STATES,
    DataFact,
    FactType,
)

ENTITIES = ["A", "B", "C", "model-x", "baseline"]
MEASURES = ["accuracy", "latency", "recall", "loss"]
CONTEXTS = ["2020-2023", "test set", "ImageNet"]
BREAKDOWNS = ["method", "year", "dataset"]


def png_bytes(color=(255, 255, 255), size=(8, 8)) -> bytes:
    buf = io.BytesIO()
    Image.new("RGB", size, color).save(buf, format="PNG")
    return buf.getvalue()


def _maybe(rng: random.Random, value, p_na=0.4):
    return None if rng.random() < p_na else value


def random_parameters(rng: random.Random, ftype: FactType):
    if ftype is FactType.TREND:
        return [rng.choice(TREND_STATES) for _ in range(rng.randint(1, 4))]
    if ftype in (FactType.COMPARISON, FactType.CORRELATION):
        a, b = rng.sample(ENTITIES, 2)
        return [rng.choice(RELATIONS), a, b]
    if ftype is FactType.DISTRIBUTION:
        return [[rng.choice(DEGREES), rng.choice(DISTRIBUTION_STATES)] for _ in range(rng.randint(1, 2))]
    if ftype is FactType.EXTREMA:
        out = [rng.choice(ENTITIES), rng.choice(["Maximum", "Minimum"])]
        if rng.random() < 0.5:
            out.append(rng.choice([0.5, 0.9, 12.0]))
        return out
    if ftype is FactType.RANK:
        return [rng.choice(ENTITIES), rng.choice([1, 2, 3, "Last"])]
    if ftype in (FactType.VALUE, FactType.PROPORTION, FactType.RANGE):
        return [rng.choice(ENTITIES)] + [rng.choice([0.1, 0.5, 3.0, 42.0]) for _ in range(rng.randint(1, 2))]
    return _maybe(rng, [rng.choice(ENTITIES)], 0.5)


def random_fact(rng: random.Random, types=None) -> DataFact:
    ftype = rng.choice(types or list(FactType))
    return DataFact(
        type=ftype,
        parameters=random_parameters(rng, ftype),
        measures=_maybe(rng, rng.sample(MEASURES, rng.randint(1, 2))),
        context=_maybe(rng, rng.choice(CONTEXTS)),
        breakdowns=_maybe(rng, rng.sample(BREAKDOWNS, rng.randint(1, 2))),
        focus=_maybe(rng, rng.sample(ENTITIES, rng.randint(1, 2)), 0.6),
    )


def random_facts(rng: random.Random, max_len: int = 6, min_len: int = 0, types=None) -> list[DataFact]:
    return [random_fact(rng, types) for _ in range(rng.randint(min_len, max_len))]


def perturb(rng: random.Random, fact: DataFact) -> DataFact:
    """A nearby fact: same type, some fields swapped for random ones."""
    other = random_fact(rng, [fact.type])
    data = fact.to_dict()
    for key in ("parameters", "measures", "context", "breakdowns", "focus"):
        if rng.random() < 0.35:
            data[key] = other.to_dict()[key]
    return DataFact.from_dict(data)


def facts_json(facts) -> str:
    return json.dumps({"facts": [f.to_dict() for f in facts]})


def task_of(req) -> str:
    """The template name from the ``TASK: <name>`` line of a system prompt."""
    for line in req.system_prompt.splitlines():
        if line.startswith("TASK: "):
            return line[len("TASK: "):].strip()
    return "generate"


class TaskRouter:
    """Mock reply function dispatching on the prompt's task.

    Each value is a string, a list consumed in order (last entry repeats) or a
    callable taking the request.
    """

    def __init__(self, replies):
        self.replies = replies
        self.seen: dict[str, int] = {}

    def __call__(self, req):
        task = task_of(req)
        reply = self.replies[task]
        n = self.seen.get(task, 0)
        self.seen[task] = n + 1
        if callable(reply):
            return reply(req)
        if isinstance(reply, list):
            return reply[min(n, len(reply) - 1)]
        return reply


# --- synthetic benchmark ------------------------------------------------------------
# Each sentence carries its own ground truth so a mock extractor/judge can answer
# any prompt deterministically by spotting which sentences a description contains.

SENTENCES = [
    ("This is a grouped bar chart.", "L1", None, False),
    ("The x axis lists the methods and the y axis shows accuracy.", "L1", None, False),
    ("Model A reaches an accuracy of 0.91.", "L2", DataFact("value", ["Model A", 0.91], measures=["accuracy"]), False),
    ("Model A reaches an accuracy of 0.99.", "L2", DataFact("value", ["Model A", 0.99], measures=["accuracy"]), True),
    ("Model B has the lowest accuracy.", "L2", DataFact("extrema", ["Model B", "Minimum"], measures=["accuracy"]), False),
    ("Model A has the highest accuracy.", "L2", DataFact("extrema", ["Model A", "Maximum"], measures=["accuracy"]), False),
    ("Model A ranks first in accuracy.", "L3", DataFact("rank", ["Model A", 1], measures=["accuracy"]), False),
    ("Accuracy increases and then peaks over the epochs.", "L3", DataFact("trend", ["Increase", "Peak"], measures=["accuracy"], breakdowns=["epoch"]), False),
    ("Accuracy decreases steadily over the epochs.", "L3", DataFact("trend", ["Decrease"], measures=["accuracy"], breakdowns=["epoch"]), True),
    ("Model A outperforms Model B on the test set.", "L3", DataFact("comparison", ["Greater", "Model A", "Model B"], measures=["accuracy"], context="test set"), False),
    ("Latency and accuracy are positively correlated.", "L3", DataFact("correlation", ["Positive", "latency", "accuracy"]), False),
    ("The gain likely stems from larger pretraining corpora.", "L4", None, False),
    ("Such margins matter for clinical deployment.", "L4", None, False),
]
ERROR_CATEGORY = {3: "numerical value", 8: "trend"}


def _present(text: str) -> list[int]:
    return [i for i, (s, *_rest) in enumerate(SENTENCES) if s in text]


def _description_of(req) -> str:
    marker = "Description:\n"
    text = req.user_text
    return text[text.index(marker) + len(marker):] if marker in text else text


def smart_reply(req) -> str:
    """Answers every prompt kind from the sentence ground truth."""
    task = task_of(req)
    found = _present(_description_of(req))
    if task == "extract_facts":
        return json.dumps({"facts": [SENTENCES[i][2].to_dict() for i in found if SENTENCES[i][2] is not None]})
    if task == "segment_levels":
        units = [
            {"text": SENTENCES[i][0], "level": SENTENCES[i][1], "fact": SENTENCES[i][2].to_dict() if SENTENCES[i][2] else None}
            for i in found
        ]
        return json.dumps({"units": units})
    if task == "extract_schema":
        return json.dumps({"axis_labels": ["method", "accuracy"], "legend_entries": ["Model A", "Model B"], "categories": []})
    if task == "faithfulness":
        errors = [{"claim_text": SENTENCES[i][0], "category": ERROR_CATEGORY[i], "explanation": "contradicts the chart"}
                  for i in found if SENTENCES[i][3]]
        return json.dumps({"n_total_claims": len(found), "n_erroneous": len(errors), "errors": errors})
    if task == "acuity":
        n4 = sum(1 for i in found if SENTENCES[i][1] == "L4")
        base = min(5, 1 + n4 + len(found) // 3)
        scores = [base, max(1, base - 1), base, min(5, 1 + n4), max(1, base - (len(found) % 2))]
        keys = ["accuracy", "integration", "insight", "etiological", "multivariate"]
        return json.dumps({**dict(zip(keys, scores)), "rationales": {k: "scripted" for k in keys}})
    # generation: describe whatever the image colour encodes
    return "This is a grouped bar chart. Model A reaches an accuracy of 0.91."


def write_dataset(root, n_records: int, seed: int = 7, with_schema: bool = True):
    """Write a JSONL dataset plus PNG charts under ``root``; returns the dataset path."""
    rng = random.Random(seed)
    (root / "charts").mkdir(parents=True, exist_ok=True)
    rows = []
    for k in range(n_records):
        name = f"charts/chart_{k:02d}.png"
        (root / name).write_bytes(png_bytes((k * 20 % 256, 90, 200)))
        picks = sorted(rng.sample(range(len(SENTENCES)), rng.randint(4, 8)))
        picks = [i for i in picks if not SENTENCES[i][3]] or [0, 2]
        row = {
            "id": f"rec-{k:02d}",
            "image_path": name,
            "reference_description": " ".join(SENTENCES[i][0] for i in picks),
            "domain": "machine learning",
            "chart_type": "bar",
        }
        if with_schema:
            row["schema"] = {"axis_labels": ["method", "accuracy"], "legend_entries": ["Model A", "Model B"], "categories": [], "title": None}
        rows.append(row)
    path = root / "dataset.jsonl"
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return path


def write_outputs(root, dataset_rows, model_names, seed: int = 11):
    """Mock model outputs: each model picks its own sentence subset per record."""
    rng = random.Random(seed)
    lines = []
    for model in model_names:
        for rec in dataset_rows:
            picks = sorted(rng.sample(range(len(SENTENCES)), rng.randint(2, 7)))
            lines.append({"record_id": rec.id, "model_name": model, "description": " ".join(SENTENCES[i][0] for i in picks)})
    path = root / "outputs.jsonl"
    path.write_text("".join(json.dumps(r) + "\n" for r in lines), encoding="utf-8")
    return path
