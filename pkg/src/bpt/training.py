"""Multi-task optimization: proposition, QA, and auxiliary generation losses.

The proposition loss is the sum (not mean) of negative log gold-class
probabilities. Training is Adam with linear warmup then a constant rate,
per-epoch dev evaluation, best-accuracy checkpointing, and is bit-reproducible
for a fixed seed. ``grad_check`` verifies analytic gradients of the combined
loss against central finite differences in double precision.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .corpus import (
    BREAK_TOKEN,
    Dataset,
    Example,
    TruthLabel,
    Vocab,
    build_vocab,
    tokenize,
)
from .model import (
    BeliefDistribution,
    BreakpointModel,
    LABEL_INDEX,
    ModelConfig,
)
from .worldgen.microworld import (
    DEFAULT_LOCATIONS,
    DEFAULT_OBJECTS,
    PERSON_GENDER,
)


class TrainingDivergedError(Exception):
    """Loss became non-finite; carries diagnostics."""


@dataclass(frozen=True)
class TrainConfig:
    lambda_prop: float = 1.0
    lambda_qa: float = 1.0
    lambda_gen: float = 0.1
    learning_rate: float = 3e-4
    batch_size: int = 8
    max_epochs: int = 20
    warmup_steps: int = 500
    # with joint QA (lambda_qa > 0) the proposition loss stays off for the
    # first qa_warmup_epochs epochs
    qa_warmup_epochs: int = 5
    weight_decay: float = 0.001
    early_stop_patience: int = 5
    seed: int = 0
    multipass: bool = False
    event_gen: bool = True
    abstraction: bool = True

    def __post_init__(self):
        weights = (self.lambda_prop, self.lambda_qa, self.lambda_gen)
        if any(w < 0 for w in weights) or not any(w > 0 for w in weights):
            raise ValueError("task weights must be nonnegative with at least one positive")


@lru_cache(maxsize=1 << 16)
def _tok(text: str) -> tuple[str, ...]:
    return tuple(tokenize(text))


@dataclass
class Prepared:
    example: Example
    story: list[str]
    markers: list[int]
    props: list[tuple[int, str]]  # (breakpoint index, text)
    labels: list[int]
    qa: list[tuple[tuple[str, ...], tuple[str, ...]]]
    sentences: list[tuple[str, ...]]  # per breakpoint, surface incl. terminator


def prepare_examples(d: Dataset) -> list[Prepared]:
    out = []
    for e in d.examples:
        props = []
        labels = []
        for bp in e.breakpoints:
            for p in bp.propositions:
                props.append((bp.index, p.text))
                labels.append(LABEL_INDEX[p.label])
        sentences: list[list[str]] = [[]]
        for tok in e.story_tokens:
            if tok == BREAK_TOKEN:
                sentences.append([])
            else:
                sentences[-1].append(tok)
        if sentences and not sentences[-1]:
            sentences.pop()
        out.append(
            Prepared(
                example=e,
                story=list(e.story_tokens),
                markers=e.marker_positions,
                props=props,
                labels=labels,
                qa=[(_tok(q.question), _tok(q.answer)) for q in e.qa],
                sentences=[tuple(s) for s in sentences],
            )
        )
    return out


@dataclass
class Batch:
    items: list[Prepared]

    @property
    def stories(self) -> list[list[str]]:
        return [it.story for it in self.items]


@dataclass
class GenTarget:
    kind: str  # "event" | "abstraction"
    rows: tuple[int, ...]
    breakpoints: tuple[int, ...]  # 1-based, aligned with rows
    target_tokens: tuple[str, ...]


def abstract_tokens(
    tokens: Sequence[str],
    objects: Sequence[str] = DEFAULT_OBJECTS,
    locations: Sequence[str] = DEFAULT_LOCATIONS,
) -> tuple[str, ...]:
    """Replace entity mentions with PERSON/OBJECT/LOCATION type tags."""
    out = []
    for t in tokens:
        if t in ("he", "she") or t in PERSON_GENDER or (t[:1].isupper() and t[1:].islower()):
            out.append("PERSON")
        elif t in objects:
            out.append("OBJECT")
        elif t in locations:
            out.append("LOCATION")
        else:
            out.append(t)
    return tuple(out)


def sample_gen_targets(
    batch: Batch, rng: np.random.Generator, event_gen: bool = True, abstraction: bool = True
) -> list[GenTarget]:
    """Per story one (breakpoint -> its event surface) pair; per story pair one
    (mean of two breakpoint states -> shared abstraction) pair."""
    targets: list[GenTarget] = []
    if event_gen:
        for row, it in enumerate(batch.items):
            if not it.sentences:
                continue
            j = int(rng.integers(len(it.sentences))) + 1
            targets.append(
                GenTarget("event", (row,), (j,), it.sentences[j - 1])
            )
    if abstraction:
        rows = list(range(len(batch.items)))
        for a, b in zip(rows[0::2], rows[1::2]):
            ita, itb = batch.items[a], batch.items[b]
            forms_a = {}
            for j, sent in enumerate(ita.sentences, start=1):
                forms_a.setdefault(abstract_tokens(sent), j)
            match = None
            order = rng.permutation(len(itb.sentences))
            for jb in order:
                form = abstract_tokens(itb.sentences[int(jb)])
                if form in forms_a:
                    match = (forms_a[form], int(jb) + 1, form)
                    break
            if match is not None:
                ja, jb, form = match
                targets.append(GenTarget("abstraction", (a, b), (ja, jb), form))
            elif ita.sentences:
                j = int(rng.integers(len(ita.sentences))) + 1
                form = abstract_tokens(ita.sentences[j - 1])
                targets.append(GenTarget("abstraction", (a, a), (j, j), form))
        if len(rows) % 2 == 1 and batch.items[rows[-1]].sentences:
            it = batch.items[rows[-1]]
            j = int(rng.integers(len(it.sentences))) + 1
            targets.append(
                GenTarget(
                    "abstraction", (rows[-1], rows[-1]), (j, j),
                    abstract_tokens(it.sentences[j - 1]),
                )
            )
    return targets


# ---------------------------------------------------------------------------
# losses


def _as_prob_tensor(distributions, device=None, dtype=None) -> torch.Tensor:
    if isinstance(distributions, torch.Tensor):
        return distributions
    rows = [
        d.probabilities if isinstance(d, BeliefDistribution) else tuple(d)
        for d in distributions
    ]
    return torch.tensor(rows, device=device, dtype=dtype or torch.get_default_dtype())


def prop_loss(distributions, gold_labels, clamp_counter: dict | None = None) -> torch.Tensor:
    """Sum over all (story, breakpoint, proposition) items of -log Pr[gold]."""
    probs = _as_prob_tensor(distributions)
    if isinstance(gold_labels, torch.Tensor):
        gold = gold_labels.to(probs.device)
    else:
        idx = [
            LABEL_INDEX[g] if isinstance(g, TruthLabel) else int(g) for g in gold_labels
        ]
        gold = torch.tensor(idx, dtype=torch.long, device=probs.device)
    picked = probs.gather(1, gold.unsqueeze(1)).squeeze(1)
    low = int((picked < 1e-12).sum())
    if low and clamp_counter is not None:
        clamp_counter["clamped"] = clamp_counter.get("clamped", 0) + low
    return -picked.clamp_min(1e-12).log().sum()


def sequence_loss(decoder_logits: torch.Tensor, target_ids: torch.Tensor) -> torch.Tensor:
    """Token-level cross-entropy summed over non-pad target positions (pad = -100)."""
    v = decoder_logits.shape[-1]
    return torch.nn.functional.cross_entropy(
        decoder_logits.reshape(-1, v),
        target_ids.reshape(-1),
        ignore_index=-100,
        reduction="sum",
    )


qa_loss = sequence_loss
gen_loss = sequence_loss


# ---------------------------------------------------------------------------
# batched forward passes


def _grouped_finals(model: BreakpointModel, batch: Batch, states, pad):
    """(B, m_max, 2d) final breakpoint embeddings plus a breakpoint pad mask."""
    rows, cols = [], []
    for r, it in enumerate(batch.items):
        rows.extend([r] * len(it.markers))
        cols.extend(it.markers)
    flat = states[rows, cols]
    initials_flat = model._project_norm(flat, "breakpoint")
    m_max = max(len(it.markers) for it in batch.items)
    b = len(batch.items)
    d = model.cfg.d_model
    initials = torch.zeros(b, m_max, d, device=states.device, dtype=states.dtype)
    bp_pad = torch.ones(b, m_max, dtype=torch.bool, device=states.device)
    offset = 0
    for r, it in enumerate(batch.items):
        m = len(it.markers)
        initials[r, :m] = initials_flat[offset : offset + m]
        bp_pad[r, :m] = False
        offset += m
    if model.cfg.brk_self_attn:
        contextual = model.brk_attn(initials, bp_pad)
    else:
        contextual = torch.zeros_like(initials)
    return torch.cat([initials, contextual], dim=-1), bp_pad


def forward_prop_distributions(
    model: BreakpointModel, batch: Batch, multipass: bool = False
):
    """Softmax belief distributions for every labeled proposition in the batch.

    Returns (probs (N, 3), gold (N,), states, pad) so callers can reuse the
    story encodings for QA and generation losses.
    """
    gold = torch.tensor(
        [l for it in batch.items for l in it.labels], dtype=torch.long, device=model.device
    )
    texts = [t for it in batch.items for _, t in it.props]
    if not texts:
        states, pad = model.encode_stories(batch.stories)
        empty = torch.zeros(0, 3, device=model.device, dtype=model.dtype)
        return empty, gold, states, pad

    distinct: dict[str, int] = {}
    for t in texts:
        distinct.setdefault(t, len(distinct))
    if multipass:
        marked = []
        index = {}
        for r, it in enumerate(batch.items):
            for j in sorted({j for j, _ in it.props}):
                index[(r, j)] = len(marked)
                marked.append(_marked_story(it, j))
        states, pad = model.encode_stories(marked)
        keep = (~pad).to(states.dtype).unsqueeze(-1)
        u_all = (states * keep).sum(1) / keep.sum(1)
        vectors = model.encode_propositions(list(distinct))
        u_rows, v_rows = [], []
        for r, it in enumerate(batch.items):
            for j, t in it.props:
                u_rows.append(index[(r, j)])
                v_rows.append(distinct[t])
        u = u_all[u_rows]
        v = vectors[v_rows]
        feats = torch.cat([u, v, (u - v).abs(), u * v], dim=-1)
        logits = model.multipass_head(feats)
        return torch.softmax(logits, dim=-1), gold, states, pad

    states, pad = model.encode_stories(batch.stories)
    finals, _ = _grouped_finals(model, batch, states, pad)
    vectors = model.encode_propositions(list(distinct))
    b_rows, bp_idx, v_rows = [], [], []
    for r, it in enumerate(batch.items):
        for j, t in it.props:
            b_rows.append(r)
            bp_idx.append(j - 1)
            v_rows.append(distinct[t])
    b = finals[b_rows, bp_idx]
    c = vectors[v_rows]
    logits = model.score_pairs(b, c)
    return torch.softmax(logits, dim=-1), gold, states, pad


def _marked_story(it: Prepared, breakpoint_index: int) -> list[str]:
    target = it.markers[breakpoint_index - 1]
    out = []
    for pos, tok in enumerate(it.story):
        if pos == target:
            out.append("[MARK]")
        elif tok != BREAK_TOKEN:
            out.append(tok)
    return out


def _teacher_forced(
    model: BreakpointModel,
    rows_memory: torch.Tensor,
    mem_pad: torch.Tensor | None,
    prompts: list[tuple[str, ...]],
    answers: list[tuple[str, ...]],
) -> torch.Tensor:
    """Summed cross-entropy over answer (+[EOS]) tokens given per-row memory."""
    seqs, tgts = [], []
    for prompt, answer in zip(prompts, answers):
        full = [2] + model.vocab.encode(list(prompt) + list(answer)) + [3]
        seqs.append(full[:-1])
        t = [-100] * len(prompt) + full[1 + len(prompt) :]
        tgts.append(t)
    width = max(len(s) for s in seqs)
    inp = torch.zeros(len(seqs), width, dtype=torch.long, device=model.device)
    tgt = torch.full((len(seqs), width), -100, dtype=torch.long, device=model.device)
    for i, (s, t) in enumerate(zip(seqs, tgts)):
        inp[i, : len(s)] = torch.tensor(s, device=model.device)
        tgt[i, : len(t)] = torch.tensor(t, device=model.device)
    logits = model.decoder_logits(inp, rows_memory, mem_pad)
    return sequence_loss(logits, tgt)


def total_loss(
    model: BreakpointModel,
    batch: Batch,
    cfg: TrainConfig,
    gen_targets: Sequence[GenTarget] = (),
    weights: tuple[float, float, float] | None = None,
    clamp_counter: dict | None = None,
):
    """Weighted multi-task loss; components with zero weight are not computed."""
    w_prop, w_qa, w_gen = weights if weights is not None else (
        cfg.lambda_prop, cfg.lambda_qa, cfg.lambda_gen,
    )
    parts: dict[str, float] = {}
    states = pad = None
    zero = torch.zeros((), device=model.device, dtype=model.dtype)
    total = zero

    if w_prop > 0:
        probs, gold, states, pad = forward_prop_distributions(
            model, batch, multipass=cfg.multipass
        )
        lp = prop_loss(probs, gold, clamp_counter) if probs.shape[0] else zero
        parts["prop"] = float(lp.detach())
        parts["prop_per_item"] = parts["prop"] / max(1, probs.shape[0])
        total = total + w_prop * lp

    needs_states = (w_qa > 0) or (w_gen > 0 and gen_targets)
    if needs_states and (states is None or cfg.multipass):
        states, pad = model.encode_stories(batch.stories)

    if w_qa > 0:
        rows, prompts, answers = [], [], []
        for r, it in enumerate(batch.items):
            for q, a in it.qa:
                rows.append(r)
                prompts.append(q)
                answers.append(a)
        if rows:
            lq = _teacher_forced(model, states[rows], pad[rows], prompts, answers)
        else:
            lq = zero
        parts["qa"] = float(lq.detach())
        total = total + w_qa * lq

    if w_gen > 0 and gen_targets:
        memories = []
        for t in gen_targets:
            vecs = [
                states[r, batch.items[r].markers[j - 1]]
                for r, j in zip(t.rows, t.breakpoints)
            ]
            memories.append(torch.stack(vecs).mean(0))
        memory = torch.stack(memories).unsqueeze(1)  # (G, 1, d)
        lg = _teacher_forced(
            model, memory, None, [()] * len(gen_targets),
            [t.target_tokens for t in gen_targets],
        )
        parts["gen"] = float(lg.detach())
        total = total + w_gen * lg
    elif w_gen > 0:
        parts["gen"] = 0.0

    parts["total"] = float(total.detach())
    return total, parts


# ---------------------------------------------------------------------------
# evaluation helpers shared with the eval harness


def evaluate_prop_accuracy(
    model: BreakpointModel,
    prepared: Sequence[Prepared],
    batch_size: int = 8,
    multipass: bool = False,
) -> tuple[float, list[np.ndarray]]:
    """(micro accuracy, per-example probability arrays) in eval mode."""
    was_training = model.training
    model.eval()
    correct = 0
    total = 0
    all_probs: list[np.ndarray] = []
    with torch.no_grad():
        for start in range(0, len(prepared), batch_size):
            chunk = list(prepared[start : start + batch_size])
            batch = Batch(chunk)
            probs, gold, _, _ = forward_prop_distributions(model, batch, multipass)
            if probs.shape[0]:
                arr = probs.cpu().numpy()
                pred = arr.argmax(axis=1)
                correct += int((pred == gold.cpu().numpy()).sum())
                total += probs.shape[0]
                offset = 0
                for it in chunk:
                    n = len(it.props)
                    all_probs.append(arr[offset : offset + n])
                    offset += n
            else:
                all_probs.extend(np.zeros((0, 3)) for _ in chunk)
    if was_training:
        model.train()
    return (correct / total if total else 0.0), all_probs


def decode_answers(
    model: BreakpointModel,
    prepared: Sequence[Prepared],
    batch_size: int = 16,
    max_new_tokens: int = 16,
) -> list[list[str]]:
    """Greedy answers for every QA pair, grouped per example."""
    was_training = model.training
    model.eval()
    out: list[list[str]] = [[] for _ in prepared]
    items = [
        (i, q) for i, it in enumerate(prepared) for q, _ in it.qa
    ]
    with torch.no_grad():
        for start in range(0, len(items), batch_size):
            chunk = items[start : start + batch_size]
            rows = sorted({i for i, _ in chunk})
            states, pad = model.encode_stories([prepared[i].story for i in rows])
            row_of = {i: r for r, i in enumerate(rows)}
            mem = states[[row_of[i] for i, _ in chunk]]
            mem_pad = pad[[row_of[i] for i, _ in chunk]]
            seqs = [[2] + model.vocab.encode(list(q)) for _, q in chunk]
            lengths = [len(s) for s in seqs]
            width = max(lengths) + max_new_tokens
            ids = torch.zeros(len(seqs), width, dtype=torch.long, device=model.device)
            for i, s in enumerate(seqs):
                ids[i, : len(s)] = torch.tensor(s, device=model.device)
            cur = list(lengths)
            done = [False] * len(seqs)
            answers: list[list[int]] = [[] for _ in seqs]
            for _ in range(max_new_tokens):
                live = [i for i in range(len(seqs)) if not done[i]]
                if not live:
                    break
                logits = model.decoder_logits(ids[live, : max(cur[i] for i in live)],
                                              mem[live], mem_pad[live])
                step = logits[range(len(live)), [cur[i] - 1 for i in live]]
                nxt = step.detach().cpu().numpy().argmax(axis=1)
                for pos, i in enumerate(live):
                    token = int(nxt[pos])
                    if token == 3:  # [EOS]
                        done[i] = True
                    else:
                        ids[i, cur[i]] = token
                        answers[i].append(token)
                        cur[i] += 1
            for (i, _), ans in zip(chunk, answers):
                out[i].append(" ".join(model.vocab.tokens[t] for t in ans))
    if was_training:
        model.train()
    return out


def evaluate_em(model: BreakpointModel, prepared: Sequence[Prepared]) -> float:
    """Exact match after trimming and case-folding, over all QA pairs."""
    decoded = decode_answers(model, prepared)
    hits = 0
    total = 0
    for it, answers in zip(prepared, decoded):
        for (_, gold), got in zip(it.qa, answers):
            total += 1
            if got.strip().casefold() == " ".join(gold).strip().casefold():
                hits += 1
    return hits / total if total else 0.0


# ---------------------------------------------------------------------------
# the train loop


@dataclass
class TrainResult:
    model: BreakpointModel
    log: list[dict]
    best_epoch: int
    best_metric: float
    vocab: Vocab


def train(
    train_ds: Dataset,
    dev_ds: Dataset,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    callbacks: Iterable[Callable[[dict], None]] = (),
) -> TrainResult:
    torch.manual_seed(cfg.seed)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.seed)))
    vocab = train_ds.vocab or build_vocab(train_ds)
    model = BreakpointModel(model_cfg, vocab)
    model.train()
    opt = torch.optim.Adam(
        model.parameters(),
        lr=cfg.learning_rate,
        betas=(0.9, 0.999),
        eps=1e-8,
        weight_decay=cfg.weight_decay,
    )
    prepared_train = prepare_examples(train_ds)
    prepared_dev = prepare_examples(dev_ds)
    clamp_counter: dict = {}
    log: list[dict] = []
    best_metric = -1.0
    best_epoch = -1
    best_state = None
    step = 0
    since_best = 0
    for epoch in range(cfg.max_epochs):
        model.reset_counters()
        t0 = time.perf_counter()
        perm = rng.permutation(len(prepared_train))
        sums = {"prop": 0.0, "qa": 0.0, "gen": 0.0, "total": 0.0}
        warmup_active = (
            cfg.lambda_qa > 0 and not cfg.multipass and epoch < cfg.qa_warmup_epochs
        )
        w_prop = 0.0 if warmup_active else cfg.lambda_prop
        for start in range(0, len(perm), cfg.batch_size):
            batch = Batch([prepared_train[i] for i in perm[start : start + cfg.batch_size]])
            gen_targets = (
                sample_gen_targets(batch, rng, cfg.event_gen, cfg.abstraction)
                if cfg.lambda_gen > 0 and not cfg.multipass
                else []
            )
            loss, parts = total_loss(
                model, batch, cfg, gen_targets,
                weights=(w_prop, 0.0 if cfg.multipass else cfg.lambda_qa,
                         0.0 if cfg.multipass else cfg.lambda_gen),
                clamp_counter=clamp_counter,
            )
            if not math.isfinite(parts["total"]):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} step {step}: {parts}"
                )
            opt.zero_grad()
            loss.backward()
            step += 1
            scale = min(1.0, step / max(1, cfg.warmup_steps))
            for group in opt.param_groups:
                group["lr"] = cfg.learning_rate * scale
            opt.step()
            for k in ("prop", "qa", "gen", "total"):
                sums[k] += parts.get(k, 0.0)
        train_encodes = model.counters["story_encodes"]
        dev_acc, _ = evaluate_prop_accuracy(
            model, prepared_dev, cfg.batch_size, multipass=cfg.multipass
        )
        dev_em = None
        if cfg.lambda_qa > 0 and not cfg.multipass and any(it.qa for it in prepared_dev):
            dev_em = evaluate_em(model, prepared_dev)
        metric = dev_acc if cfg.lambda_prop > 0 else (dev_em or 0.0)
        record = {
            "epoch": epoch,
            "loss_prop": sums["prop"],
            "loss_qa": sums["qa"],
            "loss_gen": sums["gen"],
            "loss_total": sums["total"],
            "dev_prop_accuracy": dev_acc,
            "dev_em": dev_em,
            "selection_metric": metric,
            "clamped_probs": clamp_counter.get("clamped", 0),
            "story_encodes": train_encodes,
            "wall_clock_s": time.perf_counter() - t0,
        }
        log.append(record)
        for cb in callbacks:
            cb(record)
        if metric > best_metric:
            best_metric = metric
            best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            since_best = 0
        else:
            since_best += 1
            if cfg.early_stop_patience and since_best >= cfg.early_stop_patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model=model, log=log, best_epoch=best_epoch,
                       best_metric=best_metric, vocab=vocab)


def fit_prop_only_head(
    model: BreakpointModel, dataset: Dataset, epochs: int = 5, lr: float = 1e-2,
    batch_size: int = 256, seed: int = 0,
) -> None:
    """Fit the partial-input diagnostic head on detached proposition embeddings."""
    prepared = prepare_examples(dataset)
    texts, labels = [], []
    for it in prepared:
        for (j, t), l in zip(it.props, it.labels):
            texts.append(t)
            labels.append(l)
    distinct = list(dict.fromkeys(texts))
    model.eval()
    with torch.no_grad():
        vecs = torch.cat(
            [
                model.encode_propositions(distinct[i : i + 512])
                for i in range(0, len(distinct), 512)
            ]
        )
    index = {t: i for i, t in enumerate(distinct)}
    x = vecs[[index[t] for t in texts]].detach()
    y = torch.tensor(labels, dtype=torch.long, device=model.device)
    torch.manual_seed(seed)
    opt = torch.optim.Adam(model.prop_only_head.parameters(), lr=lr)
    order = np.random.Generator(np.random.Philox(seed)).permutation(len(texts))
    for _ in range(epochs):
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            logits = model.prop_only_head(x[idx])
            loss = torch.nn.functional.cross_entropy(logits, y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckReport:
    per_tensor: dict[str, float]
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _tiny_fixture() -> tuple[Dataset, ModelConfig]:
    from .worldgen.microworld import MicroworldConfig, generate_microworld_dataset

    cfg = MicroworldConfig(
        persons=("John", "Mary"),
        objects=("apple", "ball"),
        locations=("kitchen", "garden"),
        n_events=3,
        n_qa=1,
        carryover_fluents=1,
        max_constraints=2,
        seed=11,
    )
    ds = generate_microworld_dataset(cfg, 2)
    model_cfg = ModelConfig(
        d_model=8, n_layers=1, n_heads=1, d_ffn=16, dropout=0.0,
        max_len=64, decoder_layers=1,
    )
    return ds, model_cfg


def grad_check(
    model_cfg: ModelConfig | None = None,
    tolerance: float = 1e-4,
    weights: tuple[float, float, float] = (1.0, 1.0, 0.1),
    step: float = 1e-5,
) -> GradCheckReport:
    """Analytic vs central-finite-difference gradients of the combined loss,
    per parameter tensor, in double precision with dropout off."""
    ds, default_cfg = _tiny_fixture()
    model_cfg = model_cfg or default_cfg
    torch.manual_seed(7)
    vocab = build_vocab(ds)
    model = BreakpointModel(model_cfg, vocab).double()
    model.eval()  # dropout off; forward must be a pure function of parameters
    prepared = prepare_examples(ds)
    batch = Batch(prepared)
    cfg = TrainConfig(
        lambda_prop=weights[0], lambda_qa=weights[1], lambda_gen=weights[2],
        event_gen=True, abstraction=True,
    )
    rng = np.random.Generator(np.random.Philox(3))
    gen_targets = sample_gen_targets(batch, rng)

    def loss_value() -> torch.Tensor:
        loss, _ = total_loss(model, batch, cfg, gen_targets, weights=weights)
        return loss

    loss = loss_value()
    model.zero_grad()
    loss.backward()
    analytic = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
    }

    per_tensor: dict[str, float] = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            num = torch.zeros_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = float(loss_value().detach())
                flat[i] = orig - step
                down = float(loss_value().detach())
                flat[i] = orig
                num[i] = (up - down) / (2 * step)
            a = analytic[name].view(-1)
            denom = torch.maximum(
                torch.ones_like(a), torch.maximum(a.abs(), num.abs())
            )
            per_tensor[name] = float(((a - num).abs() / denom).max()) if flat.numel() else 0.0
    worst = max(per_tensor.values()) if per_tensor else 0.0
    return GradCheckReport(per_tensor=per_tensor, max_rel_error=worst, tolerance=tolerance)
