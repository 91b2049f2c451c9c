"""Synthetic parallelizable tasks and the deterministic scripts behind them.

A TaskScript is a declarative plan: prompt, answer preamble, one or more
blocks of (title, body) branches, the text between blocks, and a
conclusion. From the plan we derive a next-token script usable by a
ScriptedEngine in every phase the pipeline can put it in:

* plain causal decoding follows the full sequential answer (preamble,
  then marker/title/colon/body per branch, marker+terminator, conclusion),
* skeleton decoding is recognized by the forced ellipsis after a title
  and follows the title-only form,
* tree-masked branch rows see only prefix + own title (+ the step-0
  re-submission of the title's last token) + own body, and continue that
  branch's body - so branch scripts are prefix-local by construction.

Because stage 3 re-encodes blocks in exactly the sequential form, the
parallel-mode final text of a well-formed plan equals the normal-mode one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import vocab
from .errors import InvalidTaskError, ScriptUndefinedError
from .grammar import stage1_prompt
from .scripted import ScriptedEngine

MAX_BRANCHES = 16
_TITLE_FORBIDDEN = (vocab.MARK, vocab.TERM, vocab.ELLIPSIS, vocab.COLON,
                    vocab.PAD, vocab.EOS)


@dataclass
class BlockPlan:
    titles: list[list[int]]
    bodies: list[list[int]]


@dataclass
class TaskScript:
    name: str
    task_text: str
    preamble: list[int]
    blocks: list[BlockPlan]
    inter_texts: list[list[int]] = field(default_factory=list)
    conclusion: list[int] = field(default_factory=list)
    expected_answer: str | None = None
    answer_tag: str | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.inter_texts) != max(len(self.blocks) - 1, 0):
            raise InvalidTaskError("need exactly one inter-block text per block gap")
        for block in self.blocks:
            if not 1 <= len(block.titles) <= MAX_BRANCHES:
                raise InvalidTaskError(
                    f"branch count {len(block.titles)} outside [1, {MAX_BRANCHES}]")
            if len(block.bodies) != len(block.titles):
                raise InvalidTaskError("titles/bodies length mismatch")
            for t in block.titles:
                if not t:
                    raise InvalidTaskError("empty branch title")
                if any(tok in _TITLE_FORBIDDEN for tok in t):
                    raise InvalidTaskError("control token inside a title")
            for b in block.bodies:
                if vocab.MARK in b or vocab.TERM in b:
                    raise InvalidTaskError("terminator token inside a body")
            for i, a in enumerate(block.titles):
                for j, b in enumerate(block.titles):
                    if i != j and b[: len(a)] == a:
                        raise InvalidTaskError("titles must be prefix-free")
        self._prompt = stage1_prompt(self.task_text)
        self._build_derived()

    def _build_derived(self):
        full: list[int] = list(self.preamble)
        answer_prefix: list[list[int]] = []
        skeleton_seq: list[list[int]] = []
        for k, block in enumerate(self.blocks):
            answer_prefix.append(list(full))
            sk: list[int] = []
            for title in block.titles:
                sk.append(vocab.MARK)
                sk.extend(title)
                sk.extend((vocab.COLON, vocab.ELLIPSIS))
            sk.extend((vocab.MARK, vocab.TERM))
            skeleton_seq.append(sk)
            for title, body in zip(block.titles, block.bodies):
                full.append(vocab.MARK)
                full.extend(title)
                full.append(vocab.COLON)
                full.extend(body)
            full.extend((vocab.MARK, vocab.TERM))
            if k < len(self.blocks) - 1:
                full.extend(self.inter_texts[k])
        full.extend(self.conclusion)
        self._full = full
        self._full_eos = full + [vocab.EOS]
        self._answer_prefix = answer_prefix
        self._skeleton_seq = skeleton_seq
        self._title_order = [
            sorted(range(len(b.titles)), key=lambda i: -len(b.titles[i]))
            for b in self.blocks
        ]

    # -- plan views ------------------------------------------------------

    @property
    def prompt_tokens(self) -> list[int]:
        return list(self._prompt)

    @property
    def n_branches(self) -> int:
        return max((len(b.titles) for b in self.blocks), default=0)

    def full_answer_tokens(self) -> list[int]:
        return list(self._full)

    def full_answer_text(self) -> str:
        return vocab.decode(self._full)

    def stage_counts(self) -> dict:
        """Token counts the bench's analytic throughput model works from."""
        skeleton = []
        bodies = []
        for k, block in enumerate(self.blocks):
            s = sum(3 + len(t) for t in block.titles) + 2
            if k == 0:
                s += len(self.preamble)
            skeleton.append(s)
            bodies.append([len(b) for b in block.bodies])
        continuations = [len(t) for t in self.inter_texts] + [len(self.conclusion)]
        return {"skeleton": skeleton, "bodies": bodies,
                "continuations": continuations, "plain": len(self._full)}

    def fits(self, max_steps: int, max_skeleton: int, max_continuation: int) -> bool:
        counts = self.stage_counts()
        return (all(s <= max_skeleton for s in counts["skeleton"])
                and all(len(b) + 1 <= max_steps
                        for blk in self.blocks for b in blk.bodies)
                and all(c < max_continuation for c in counts["continuations"]))

    # -- the script ------------------------------------------------------

    def continuation(self, visible) -> int:
        if visible and visible[-1] == vocab.PAD:
            return vocab.PAD
        prompt = self._prompt
        lv = len(visible)
        if lv <= len(prompt):
            if visible == prompt[: lv]:
                return prompt[lv] if lv < len(prompt) else self._full_eos[0]
            raise ScriptUndefinedError("visible sequence diverges from the prompt")
        if visible[: len(prompt)] != prompt:
            raise ScriptUndefinedError("visible sequence does not start with the prompt")
        r = visible[len(prompt):]
        fe = self._full_eos
        if len(r) < len(fe) and r == fe[: len(r)]:
            return fe[len(r)]
        for k in range(len(self.blocks) - 1, -1, -1):
            ap = self._answer_prefix[k]
            if len(r) <= len(ap) or r[: len(ap)] != ap:
                continue
            tail = r[len(ap):]
            sk = self._skeleton_seq[k]
            if len(tail) < len(sk) and tail == sk[: len(tail)]:
                return sk[len(tail)]
            if tail[0] != vocab.MARK:
                nxt = self._branch_next(k, tail)
                if nxt is not None:
                    return nxt
        raise ScriptUndefinedError(
            f"no continuation for answer tokens {r[-12:]} (len {len(r)})")

    def _branch_next(self, k: int, tail) -> int | None:
        block = self.blocks[k]
        for b in self._title_order[k]:
            title, body = block.titles[b], block.bodies[b]
            if len(tail) < len(title):
                if tail == title[: len(tail)]:
                    return title[len(tail)]
                continue
            if tail[: len(title)] != title:
                continue
            rest = tail[len(title):]
            if not rest:
                return body[0] if body else vocab.MARK
            if rest[0] != title[-1]:
                continue
            rest = rest[1:]
            if len(rest) <= len(body) and rest == body[: len(rest)]:
                return body[len(rest)] if len(rest) < len(body) else vocab.MARK
        return None

    def engine(self) -> ScriptedEngine:
        return ScriptedEngine(self.continuation)

    def check_answer(self, final_text: str) -> bool | None:
        """Exact match on the tagged answer line; None when the task defines none."""
        if self.expected_answer is None or self.answer_tag is None:
            return None
        pos = final_text.rfind(self.answer_tag)
        if pos < 0:
            return False
        value = final_text[pos + len(self.answer_tag):].splitlines()[0].strip()
        return value == self.expected_answer


# -- text helpers ---------------------------------------------------------

_FIRST_NAMES = ["Avery", "Blake", "Carmen", "Dario", "Elif", "Farah", "Gustav",
                "Hana", "Ines", "Jonas", "Keiko", "Liam", "Mara", "Nadia",
                "Omar", "Priya", "Quinn", "Rosa", "Sena", "Tomas", "Uma",
                "Viktor", "Wanda", "Xenia", "Yusuf", "Zofia"]
_LAST_NAMES = ["Adler", "Brandt", "Costa", "Dubois", "Evans", "Fischer",
               "Garcia", "Hoffman", "Ito", "Jensen", "Kovacs", "Lindgren",
               "Moreau", "Novak", "Okafor", "Petrov", "Rossi", "Sato",
               "Tanaka", "Weber"]
_CITIES = ["Lisbon", "Oslo", "Quito", "Riga", "Seoul", "Turin", "Vienna",
           "Zagreb", "Kyoto", "Perth", "Lagos", "Dakar", "Malmo", "Tunis"]
_ASPECTS = ["cost structure", "team capacity", "legal exposure", "market timing",
            "supply risk", "data privacy", "user adoption", "maintenance load",
            "energy footprint", "vendor lock-in"]
_TOPICS = ["a rooftop solar retrofit", "an overnight parcel network",
           "a community repair workshop", "a modular housing line",
           "a regional rail upgrade", "an open sensor platform"]
_ADJECTIVES = ["solid", "weak", "mixed", "stable", "risky", "sound"]


def _pad_body(text: str, target: int) -> list[int]:
    """Encode a body, padding with filler words up to ``target`` bytes.

    Texts already longer than target are kept as they are; callers pick
    base texts short enough when exact lengths matter.
    """
    body = vocab.encode(text)
    if len(body) < target:
        filler = (" noted" * ((target - len(body)) // 6 + 1))[: target - len(body)]
        body.extend(vocab.encode(filler))
    return body


def _sample_names(rng: np.random.Generator, n: int) -> list[str]:
    firsts = rng.choice(len(_FIRST_NAMES), size=n, replace=False)
    lasts = rng.choice(len(_LAST_NAMES), size=n, replace=(n > len(_LAST_NAMES)))
    return [f"{_FIRST_NAMES[f]} {_LAST_NAMES[l]}" for f, l in zip(firsts, lasts)]


def _body_target(rng: np.random.Generator, body_len) -> int:
    lo, hi = body_len
    return int(rng.integers(lo, hi + 1))


# -- generators -----------------------------------------------------------

def gen_retrieval_task(n: int, seed: int, body_len=(15, 25)) -> TaskScript:
    """One record's score falls in the asked range; branches judge each record.

    Titles are bare first names (the pool starts with 26 distinct letters, so
    titles stay prefix-free) and the framing text is kept short: the job of
    this suite is to measure the parallel fraction, not prompt handling.
    """
    if not 2 <= n <= MAX_BRANCHES:
        raise InvalidTaskError(f"retrieval needs n in [2, {MAX_BRANCHES}], got {n}")
    rng = np.random.default_rng(seed)
    first_ids = rng.choice(len(_FIRST_NAMES), size=n, replace=False)
    names = [_FIRST_NAMES[i] for i in first_ids]
    scores = rng.choice(np.arange(100, 501), size=n, replace=False) / 100.0
    target = int(rng.integers(0, n))
    t = scores[target]
    below = scores[scores < t]
    above = scores[scores > t]
    prev = below.max() if below.size else 0.99
    nxt = above.min() if above.size else 5.01
    lo = round(prev + (t - prev) / 2, 2)
    hi = round(t + (nxt - t) / 2, 2)
    lo = min(max(lo, round(prev + 0.01, 2)), t)
    hi = max(min(hi, round(nxt - 0.01, 2)), t)

    lines = [f"Here are {n} student records."]
    for name, v in zip(names, scores):
        lines.append(f"The student named {name} has a GPA of {v:.2f}.")
    lines.append(f"Which student's GPA lies between {lo:.2f} and {hi:.2f}?"
                 f" Check every student, then finish with 'Name' and a colon.")
    task_text = "\n".join(lines)

    titles = [vocab.encode(name) for name in names]
    bodies = []
    for i, v in enumerate(scores):
        verdict = "in range" if i == target else "not in range"
        bodies.append(_pad_body(f" {v:.2f} {verdict}", _body_target(rng, body_len)))
    answer = names[target]
    return TaskScript(
        name=f"retrieval-n{n}-s{seed}",
        task_text=task_text,
        preamble=vocab.encode("Checking each record."),
        blocks=[BlockPlan(titles, bodies)],
        conclusion=vocab.encode(f"\nName: {answer}"),
        expected_answer=answer,
        answer_tag="Name:",
        meta={"suite": "retrieval", "n": n, "seed": seed,
              "lo": lo, "hi": hi, "scores": [float(v) for v in scores],
              "names": names, "body_len": list(body_len)},
    )


def gen_multidoc_task(n: int, seed: int, body_len=(15, 25)) -> TaskScript:
    """Exactly one of n documents answers the question; branches scan each."""
    if not 2 <= n <= MAX_BRANCHES:
        raise InvalidTaskError(f"multidoc needs n in [2, {MAX_BRANCHES}], got {n}")
    rng = np.random.default_rng(seed)
    person = _sample_names(rng, 1)[0]
    city_ids = rng.choice(len(_CITIES), size=2, replace=False)
    city, decoy_city = _CITIES[city_ids[0]], _CITIES[city_ids[1]]
    relevant = int(rng.integers(0, n))
    extras = _sample_names(rng, min(n, 6))

    lines = [f"You are given {n} short documents."]
    for i in range(n):
        if i == relevant:
            lines.append(f"Document {i + 1:02d}: {person} was born in {city}.")
        else:
            other = extras[i % len(extras)]
            lines.append(f"Document {i + 1:02d}: {other} once lectured in {decoy_city}.")
    lines.append(f"Where was {person} born? Scan each document, then finish"
                 f" with 'Answer' and a colon.")
    task_text = "\n".join(lines)

    titles = [vocab.encode(f"Document {i + 1:02d}") for i in range(n)]
    bodies = []
    for i in range(n):
        text = f" has it, born in {city}" if i == relevant else " has no birth info"
        bodies.append(_pad_body(text, _body_target(rng, body_len)))
    return TaskScript(
        name=f"multidoc-n{n}-s{seed}",
        task_text=task_text,
        preamble=vocab.encode("Scanning the documents."),
        blocks=[BlockPlan(titles, bodies)],
        conclusion=vocab.encode(f"\nAnswer: {city}"),
        expected_answer=city,
        answer_tag="Answer:",
        meta={"suite": "multidoc", "n": n, "seed": seed,
              "relevant": relevant, "city": city, "person": person,
              "body_len": list(body_len)},
    )


def gen_planning_task(k: int | None, seed: int, body_len=(15, 25)) -> TaskScript:
    """k independent aspects, no exact answer. k=None draws 2+Binomial(8, 0.3)."""
    rng = np.random.default_rng(seed)
    if k is None:
        k = 2 + int(rng.binomial(8, 0.3))
    if not 2 <= k <= 10:
        raise InvalidTaskError(f"planning needs k in [2, 10], got {k}")
    topic = _TOPICS[int(rng.integers(0, len(_TOPICS)))]
    aspect_ids = rng.choice(len(_ASPECTS), size=k, replace=False)
    aspects = [_ASPECTS[i] for i in aspect_ids]
    task_text = (f"Assess the proposal for {topic}, covering "
                 f"{', '.join(aspects)}. Close with an overall verdict.")
    titles = [vocab.encode(a) for a in aspects]
    bodies = [
        _pad_body(f" rated {_ADJECTIVES[int(rng.integers(0, len(_ADJECTIVES)))]}",
                  _body_target(rng, body_len))
        for _ in range(k)
    ]
    verdict = _ADJECTIVES[int(rng.integers(0, len(_ADJECTIVES)))]
    return TaskScript(
        name=f"planning-k{k}-s{seed}",
        task_text=task_text,
        preamble=vocab.encode(f"I will take the aspects of {topic} in turn."),
        blocks=[BlockPlan(titles, bodies)],
        conclusion=vocab.encode(f"\nOverall the proposal looks {verdict}."),
        expected_answer=None,
        meta={"suite": "planning", "k": k, "seed": seed, "aspects": aspects,
              "body_len": list(body_len)},
    )


def gen_single_branch_task(seed: int, body_len=(15, 25)) -> TaskScript:
    """Degenerate one-branch task: nothing to parallelize."""
    rng = np.random.default_rng(seed)
    topic = _TOPICS[int(rng.integers(0, len(_TOPICS)))]
    aspect = _ASPECTS[int(rng.integers(0, len(_ASPECTS)))]
    body = _pad_body(f" rated {_ADJECTIVES[int(rng.integers(0, len(_ADJECTIVES)))]}",
                     _body_target(rng, body_len))
    return TaskScript(
        name=f"single-s{seed}",
        task_text=f"Assess only the {aspect} of {topic}.",
        preamble=vocab.encode("One aspect to cover."),
        blocks=[BlockPlan([vocab.encode(aspect)], [body])],
        conclusion=vocab.encode("\nThat covers it."),
        meta={"suite": "single", "n": 1, "seed": seed},
    )


def gen_two_block_task(seed: int, body_len=(12, 20)) -> TaskScript:
    """Two parallel blocks separated by sequential text (marker loop-back)."""
    rng = np.random.default_rng(seed)
    names = _sample_names(rng, 2)
    aspect_ids = rng.choice(len(_ASPECTS), size=2, replace=False)
    aspects = [_ASPECTS[i] for i in aspect_ids]
    block1 = BlockPlan(
        [vocab.encode(n) for n in names],
        [_pad_body(" record reviewed", _body_target(rng, body_len))
         for _ in names],
    )
    block2 = BlockPlan(
        [vocab.encode(a) for a in aspects],
        [_pad_body(" rated sound", _body_target(rng, body_len))
         for _ in aspects],
    )
    return TaskScript(
        name=f"twoblock-s{seed}",
        task_text=(f"First review the records of {names[0]} and {names[1]}, "
                   f"then assess {aspects[0]} and {aspects[1]}."),
        preamble=vocab.encode("Records first."),
        blocks=[block1, block2],
        inter_texts=[vocab.encode("\nNow the aspects.")],
        conclusion=vocab.encode("\nAll four points are covered."),
        meta={"suite": "twoblock", "seed": seed},
    )


_LETTERS = "abcdefghijklmnopqrstuvwxyz"


def gen_random_plan(seed: int, allow_plain: bool = True) -> TaskScript:
    """Fuzz plan for grammar properties: random preambles (colons included),
    titles, bodies (possibly empty), occasionally no block at all."""
    rng = np.random.default_rng(seed)

    def word(lo=1, hi=8):
        return "".join(_LETTERS[i] for i in rng.integers(0, 26, int(rng.integers(lo, hi + 1))))

    preamble = word(3, 12)
    if rng.random() < 0.3:
        preamble += ": " + word()  # a preamble colon must stay inert
    if allow_plain and rng.random() < 0.15:
        return TaskScript(
            name=f"fuzz-plain-s{seed}", task_text=f"say {word()}",
            preamble=vocab.encode(preamble), blocks=[],
            conclusion=vocab.encode(" " + word()),
            meta={"suite": "fuzz", "seed": seed, "plain": True},
        )
    n = int(rng.integers(1, 7))
    titles = []
    seen = set()
    while len(titles) < n:
        t = word(2, 8)
        if any(t.startswith(u) or u.startswith(t) for u in seen):
            continue
        seen.add(t)
        titles.append(vocab.encode(t))
    bodies = []
    for _ in range(n):
        blen = int(rng.integers(0, 16))
        text = " " + word(1, 6) if blen else ""
        bodies.append(_pad_body(text, blen) if blen else [])
    conclusion = " " + word(2, 10)
    if rng.random() < 0.3:
        conclusion += ": " + word()
    return TaskScript(
        name=f"fuzz-s{seed}", task_text=f"cover {word()}",
        preamble=vocab.encode(preamble),
        blocks=[BlockPlan(titles, bodies)],
        conclusion=vocab.encode(conclusion),
        meta={"suite": "fuzz", "seed": seed},
    )


# -- suites ---------------------------------------------------------------

def suite_defaults() -> dict:
    return json.loads(resources.files("fanout.assets")
                      .joinpath("suite_defaults.json").read_text("utf-8"))


def make_suite(name: str, count: int | None = None, base_seed: int | None = None,
               **overrides) -> list[TaskScript]:
    defaults = suite_defaults()
    if name in defaults:
        params = dict(defaults[name])
    elif name in ("single", "twoblock"):
        params = {"count": 20, "base_seed": 9000, "body_len": [15, 25]}
    else:
        raise InvalidTaskError(f"unknown suite {name!r}")
    params.update(overrides)
    if count is not None:
        params["count"] = count
    if base_seed is not None:
        params["base_seed"] = base_seed
    body_len = tuple(params.get("body_len", (15, 25)))
    seeds = [params["base_seed"] + i for i in range(params["count"])]
    if name == "retrieval":
        return [gen_retrieval_task(params.get("n", 10), s, body_len) for s in seeds]
    if name == "multidoc":
        return [gen_multidoc_task(params.get("n", 10), s, body_len) for s in seeds]
    if name == "planning":
        return [gen_planning_task(params.get("k"), s, body_len) for s in seeds]
    if name == "single":
        return [gen_single_branch_task(s, body_len) for s in seeds]
    return [gen_two_block_task(s) for s in seeds]
