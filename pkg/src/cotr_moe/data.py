"""Synthetic instruction-following corpus over an integer toy vocabulary.

Each sample carries an image descriptor (an integer), an instruction token
sequence, and a deterministic target response.  Three latent attributes are
derived from the descriptor's bits; the task tag decides which attribute
the instruction asks for, and different synthetic vision experts embed
different attributes, so the task families genuinely need different visual
processing:

    general        asks for attribute a (first expert, first token half)
    knowledge-like asks for attribute b (first expert, second token half)
    ocr-like       asks for attribute c (second expert)
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

PAD, BOS, EOS = 0, 1, 2
ASK_GENERAL, ASK_KNOWLEDGE, ASK_OCR = 3, 4, 5
VALUE_BASE = 8          # answer token for value v is VALUE_BASE + v
N_VALUES = 8
FILLER_BASE = 16        # uninformative instruction padding tokens
N_FILLERS = 12
MIN_VOCAB = FILLER_BASE + N_FILLERS

TASKS = ("general", "knowledge-like", "ocr-like")
TASK_ASK_TOKEN = {"general": ASK_GENERAL, "knowledge-like": ASK_KNOWLEDGE,
                  "ocr-like": ASK_OCR}
MAX_INSTRUCTION_LEN = 12
MAX_FILLERS = 3         # answer tokens are shared across families, so the ask
                        # token must stay prominent in pooled text features
DESCRIPTOR_BITS = 18


@dataclass
class SyntheticSample:
    descriptor: int
    instruction: list[int]
    response: list[int]
    task: str


def attributes(descriptor: int) -> tuple[int, int, int]:
    """The three latent attributes packed into the descriptor's low bits."""
    return descriptor & 7, (descriptor >> 3) & 7, (descriptor >> 6) & 7


def answer_value(descriptor: int, task: str) -> int:
    a, b, c = attributes(descriptor)
    if task == "general":
        return a
    if task == "knowledge-like":
        return b
    if task == "ocr-like":
        return c
    raise ValueError(f"unknown task tag {task!r}")


def make_sample(descriptor: int, task: str, rng: np.random.Generator) -> SyntheticSample:
    n_fillers = int(rng.integers(0, MAX_FILLERS + 1))
    fillers = [FILLER_BASE + int(v) for v in rng.integers(0, N_FILLERS, size=n_fillers)]
    instruction = ([TASK_ASK_TOKEN[task]] + fillers)[:MAX_INSTRUCTION_LEN]
    response = [VALUE_BASE + answer_value(descriptor, task)]
    return SyntheticSample(descriptor, instruction, response, task)


def synthesize(n_samples: int, seed: int) -> list[SyntheticSample]:
    """Deterministic corpus: descriptors drawn once, tasks cycled evenly."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng([seed, 2])
    samples = []
    for i in range(n_samples):
        descriptor = int(rng.integers(0, 1 << DESCRIPTOR_BITS))
        samples.append(make_sample(descriptor, TASKS[i % len(TASKS)], rng))
    return samples


def save_jsonl(samples: list[SyntheticSample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(asdict(s), sort_keys=True) + "\n")


def load_jsonl(path) -> list[SyntheticSample]:
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            missing = {"descriptor", "instruction", "response", "task"} - obj.keys()
            if missing:
                raise ValueError(f"{path}:{line_no}: missing fields {sorted(missing)}")
            samples.append(SyntheticSample(
                descriptor=int(obj["descriptor"]),
                instruction=[int(t) for t in obj["instruction"]],
                response=[int(t) for t in obj["response"]],
                task=str(obj["task"]),
            ))
    return samples
