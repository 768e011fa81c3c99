"""Visual RL over the AR model: exact program rewards, GRPO, Bellman checks.

The policy is the text-to-image AR model.  Each step it samples a group of
B full token sequences for one prompt, the one-step renderer turns them
into images, and a reward program scores each image against the prompt's
checklist by actually parsing the picture: nearest-palette quantization,
4-connected components, exact predicate evaluation.  Group-standardized
advantages weight a per-token log-likelihood objective with a ratio-based
KL estimator against the rollout-time policy snapshot.

Also here: the tabular MDP apparatus showing that the sampled-sequence
value function satisfies the backward (Bellman) recursion exactly when
states only ever append — the structural property that makes token-level
RL on these sequences well-posed — and an ordering harness that re-runs
the same SFT + RL budget with permuted token targets so orderings can be
compared under identical seeds.

Rollouts are drawn from the plain conditional policy with exactly K
visual tokens: adjusted sampling stays an inference-time tool, and the
renderer needs full sequences.
"""

from __future__ import annotations

import dataclasses
import itertools
import json

import numpy as np

from . import armodel as am
from . import autodiff as ad
from . import renderer as rd
from . import scenes, seeding, tokenizer
from .autodiff import ContractViolation, Tensor


# ---------------------------------------------------------------------------
# scene recovery: parse a rendered image back into shapes


@dataclasses.dataclass(frozen=True)
class RecoveredShape:
    color: str
    pixels: int
    centroid: tuple      # (row, col), float


@dataclasses.dataclass(frozen=True)
class RecoveredScene:
    background: str
    shapes: tuple


def recover_scene(image: np.ndarray, min_pixels: int = 8) -> RecoveredScene:
    """Nearest-palette quantization + 4-connected components.

    The background is the modal palette color; every maximal same-color
    component not of that color becomes one shape.  On hard-edged renders
    of sampled scenes (1px bounding-box gaps) this recovers each drawn
    shape exactly — the smallest drawable shape covers 13 pixels, so the
    ``min_pixels`` speckle filter (which keeps learned renders parseable)
    never drops a real shape.  Shapes are ordered largest-first for stable
    downstream use; ties break on centroid position.
    """
    idx = scenes.quantize_to_palette(np.asarray(image, dtype=np.float64))
    h, w = idx.shape
    bg = int(np.bincount(idx.reshape(-1), minlength=8).argmax())
    seen = np.zeros((h, w), dtype=bool)
    shapes = []
    for r0 in range(h):
        for c0 in range(w):
            if seen[r0, c0] or idx[r0, c0] == bg:
                continue
            color = idx[r0, c0]
            stack = [(r0, c0)]
            seen[r0, c0] = True
            cells = []
            while stack:
                r, c = stack.pop()
                cells.append((r, c))
                for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                    if 0 <= rr < h and 0 <= cc < w and not seen[rr, cc] \
                            and idx[rr, cc] == color:
                        seen[rr, cc] = True
                        stack.append((rr, cc))
            if len(cells) < min_pixels:
                continue
            arr = np.array(cells, dtype=np.float64)
            shapes.append(RecoveredShape(
                color=scenes.COLOR_NAMES[color], pixels=len(cells),
                centroid=(float(arr[:, 0].mean()), float(arr[:, 1].mean()))))
    shapes.sort(key=lambda s: (-s.pixels, s.centroid))
    return RecoveredScene(background=scenes.COLOR_NAMES[bg], shapes=tuple(shapes))


# ---------------------------------------------------------------------------
# program rewards


PREDICATE_KINDS = ("count_equals", "color_is", "position_rel")
RELATIONS = ("left_of", "right_of", "above", "below")


@dataclasses.dataclass(frozen=True)
class RewardSpec:
    """Checklist of (predicate kind, args); reward is the mean of 0/1 scores."""
    checklist: tuple

    def __post_init__(self):
        if not self.checklist:
            raise ContractViolation("empty checklist")
        for kind, _ in self.checklist:
            if kind not in PREDICATE_KINDS:
                raise ContractViolation(f"unknown predicate kind {kind!r}")


def _eval_predicate(rec: RecoveredScene, kind: str, args: tuple) -> int:
    if kind == "count_equals":
        return int(len(rec.shapes) == int(args[0]))
    if kind == "color_is":
        # at least one shape, and every shape carries the named color
        return int(bool(rec.shapes) and all(s.color == args[0] for s in rec.shapes))
    if kind == "position_rel":
        # relation between the two largest shapes (largest first)
        if len(rec.shapes) < 2:
            return 0
        (ra, ca), (rb, cb) = rec.shapes[0].centroid, rec.shapes[1].centroid
        rel = args[0]
        return int({"left_of": ca < cb, "right_of": ca > cb,
                    "above": ra < rb, "below": ra > rb}[rel])
    raise ContractViolation(f"unknown predicate kind {kind!r}")


def program_reward(image: np.ndarray, spec: RewardSpec) -> float:
    """Mean predicate score in [0, 1]; an imparseable image scores 0."""
    rec = recover_scene(image)
    if not rec.shapes:
        return 0.0
    scores = [_eval_predicate(rec, kind, tuple(args)) for kind, args in spec.checklist]
    return float(np.mean(scores))


def checklist_for_scene(spec: scenes.SceneSpec) -> RewardSpec:
    """Build a checklist every rendered copy of ``spec`` satisfies exactly.

    Facts are read back off the render itself, so the reward oracle
    invariant (reward 1.0 on ground truth) holds by construction.
    """
    rec = recover_scene(scenes.render_scene(spec))
    checks = [("count_equals", (len(rec.shapes),))]
    if rec.shapes and len({s.color for s in rec.shapes}) == 1:
        checks.append(("color_is", (rec.shapes[0].color,)))
    if len(rec.shapes) >= 2:
        (ra, ca), (rb, cb) = rec.shapes[0].centroid, rec.shapes[1].centroid
        if ca != cb:
            checks.append(("position_rel", ("left_of" if ca < cb else "right_of",)))
        elif ra != rb:
            checks.append(("position_rel", ("above" if ra < rb else "below",)))
    return RewardSpec(tuple(checks))


# ---------------------------------------------------------------------------
# prompt suites: symbolic tasks with checklists


@dataclasses.dataclass(frozen=True)
class Task:
    prompt_names: tuple      # vocabulary name strings, e.g. ("count:2", "color:red")
    spec: RewardSpec

    def prompt_ids(self, vocab: am.Vocabulary) -> list:
        return [vocab.names.index(n) for n in self.prompt_names]


def make_count_color_tasks(counts, colors) -> list:
    """One task per (count, color) pair: exactly n shapes, all of one color."""
    return [Task((f"count:{n}", f"color:{c}"),
                 RewardSpec((("count_equals", (n,)), ("color_is", (c,)))))
            for n, c in itertools.product(counts, colors)]


def split_tasks(tasks, holdout_every: int = 3) -> tuple:
    """Deterministic train/eval prompt split with no overlap.

    Every ``holdout_every``-th task (starting from the first) is held out
    for evaluation; the rest form the RL training suite.  For the default
    count x color product ordering this keeps every count and every color
    represented on both sides while the (count, color) pairs stay disjoint,
    so the held-out reward measures transfer, not memorization.
    """
    if holdout_every < 2:
        raise ContractViolation(
            f"holdout_every must be >= 2, got {holdout_every}")
    if len(tasks) < holdout_every:
        raise ContractViolation(
            f"need at least {holdout_every} tasks to split, got {len(tasks)}")
    train = [t for i, t in enumerate(tasks) if i % holdout_every != 0]
    return train, list(tasks[::holdout_every])


def write_prompt_suite(path, tasks) -> None:
    """One line per task: prompt words, a pipe, then the checklist."""
    with open(path, "w") as fh:
        for t in tasks:
            checks = " ; ".join(f"{kind}:{','.join(str(a) for a in args)}"
                                for kind, args in t.spec.checklist)
            fh.write(f"{' '.join(t.prompt_names)} | {checks}\n")


def _parse_arg(kind: str, raw: str):
    return int(raw) if kind == "count_equals" else raw


def read_prompt_suite(path) -> list:
    tasks = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            head, _, tail = line.partition("|")
            checks = []
            for item in tail.split(";"):
                kind, _, args = item.strip().partition(":")
                checks.append((kind, tuple(_parse_arg(kind, a)
                                           for a in args.split(","))))
            tasks.append(Task(tuple(head.split()), RewardSpec(tuple(checks))))
    return tasks


def sample_task_scene(rng: np.random.Generator, count: int, color: str,
                      cfg: scenes.SceneConfig = scenes.SceneConfig()) -> scenes.SceneSpec:
    """A scene satisfying a count/color task: n shapes, single color, dark bg."""
    bg = "black" if color != "black" else "white"
    return scenes.sample_scene(rng, cfg, count=count, colors=(color,), background=bg)


def scene_for_task(rng: np.random.Generator, task: Task) -> scenes.SceneSpec:
    by_kind = dict(task.spec.checklist)
    count = int(by_kind["count_equals"][0])
    color = by_kind["color_is"][0]
    return sample_task_scene(rng, count, color)


# ---------------------------------------------------------------------------
# GRPO mechanics


def compute_advantages(rewards, eps: float = 1e-6) -> np.ndarray:
    """Group-standardized rewards: (r - mean) / std, population std.

    Returns all zeros when the rewards are (numerically) identical.
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or len(r) < 2:
        raise ContractViolation(f"advantages need >= 2 rewards, got shape {r.shape}")
    std = r.std()
    if std < eps:
        return np.zeros_like(r)
    return (r - r.mean()) / std


@dataclasses.dataclass
class RolloutGroup:
    prompt_ids: list
    sequences: np.ndarray      # (B, T), all the same well-formed shape
    rewards: np.ndarray        # (B,)
    advantages: np.ndarray     # (B,)
    visual_count: int


def visual_logprobs(state: am.ARState, sequences: np.ndarray,
                    n_prompt: int, k: int) -> Tensor:
    """Per-token log-probabilities of the K visual tokens, shape (B, K).

    Sequence layout is [BOS, prompt(n), BOV, v_1..v_K, EOV, EOS]; position
    n_prompt + 1 + j of the shifted logits predicts visual token j.
    """
    seqs = np.asarray(sequences)
    logits = am.forward(state, seqs[:, :-1])
    logp = ad.log_softmax(logits, axis=-1)
    start = n_prompt + 1
    window = logp[:, start:start + k, :]
    targets = seqs[:, start + 1:start + 1 + k]
    return ad.take_last_axis(window, targets)


def kl_estimate(lp_new: Tensor, lp_old: np.ndarray) -> Tensor:
    """Per-token ratio estimator pi_old/pi - log(pi_old/pi) - 1, >= 0."""
    delta = ad.sub(Tensor(np.asarray(lp_old)), lp_new)   # log(pi_old / pi)
    ones = Tensor(np.ones(delta.shape))
    return ad.sub(ad.sub(ad.exp(delta), delta), ones)


def grpo_step(state: am.ARState, old_state: am.ARState, group: RolloutGroup,
              lam: float = 0.01) -> dict:
    """One policy update from a rollout group; the old policy is read-only.

    loss = -(1/B) sum_i [ A_i * mean_t log pi(v_t^i) - lam * mean_t KL_t^i ]
    """
    n_prompt, k = len(group.prompt_ids), group.visual_count
    lp_new = visual_logprobs(state, group.sequences, n_prompt, k)
    lp_old = visual_logprobs(old_state, group.sequences, n_prompt, k).data
    kl = kl_estimate(lp_new, lp_old)
    b = len(group.rewards)
    mean_lp = ad.tmean(lp_new, axis=1)
    mean_kl = ad.tmean(kl, axis=1)
    gain = ad.sub(ad.tsum(ad.mul(mean_lp, Tensor(group.advantages))),
                  ad.scale(ad.tsum(mean_kl), lam))
    loss = ad.scale(gain, -1.0 / b)
    if not np.isfinite(loss.data):
        raise ContractViolation("grpo: non-finite loss")
    ad.backward(loss)
    state.optimizer.step()
    return {"loss": float(loss.data), "kl": float(mean_kl.data.mean()),
            "reward_mean": float(group.rewards.mean()),
            "reward_std": float(group.rewards.std())}


def snapshot_policy(state: am.ARState) -> am.ARState:
    """Frozen copy for rollout-time reference; shares nothing writable."""
    params = {k: Tensor(t.data.copy()) for k, t in state.params.items()}
    return am.ARState(cfg=state.cfg, vocab=state.vocab, params=params,
                      optimizer=None, step=state.step)


# ---------------------------------------------------------------------------
# rollouts and training


def _canonical_tokens(visual_indices: np.ndarray, order) -> np.ndarray:
    """Undo a target-side permutation: row[order] = sampled row."""
    if order is None:
        return visual_indices
    canonical = np.empty_like(visual_indices)
    canonical[:, np.asarray(order)] = visual_indices
    return canonical


def rollout_group(state: am.ARState, tok_state, rend_state, task: Task,
                  batch: int, rng: np.random.Generator,
                  order=None) -> RolloutGroup:
    """Sample B sequences for one prompt and score their renders."""
    prompt = task.prompt_ids(state.vocab)
    k = tok_state.cfg.token_count
    seqs, visual = am.sample_conditional_batch(state, prompt, batch, k, rng)
    images = rd.render(_canonical_tokens(visual, order), tok_state.codebook,
                       rend_state)
    rewards = np.array([program_reward(img, task.spec) for img in images])
    return RolloutGroup(prompt_ids=prompt, sequences=seqs,
                        rewards=rewards, advantages=compute_advantages(rewards),
                        visual_count=k)


def evaluate_tasks(state: am.ARState, tok_state, rend_state, tasks,
                   samples_per_task: int, seed: int, order=None) -> dict:
    """Mean program reward over fresh rollouts; no test-time tricks."""
    per_task = {}
    for i, task in enumerate(tasks):
        rng = seeding.rng_for(seed, "visrl", "eval", str(i))
        _, visual = am.sample_conditional_batch(
            state, task.prompt_ids(state.vocab), samples_per_task,
            tok_state.cfg.token_count, rng)
        images = rd.render(_canonical_tokens(visual, order), tok_state.codebook,
                           rend_state)
        per_task[task.prompt_names] = float(np.mean(
            [program_reward(img, task.spec) for img in images]))
    return {"mean": float(np.mean(list(per_task.values()))), "per_task": per_task}


def rl_train(state: am.ARState, tok_state, rend_state, tasks, steps: int,
             batch: int = 8, lam: float = 0.01, seed: int = 0,
             order=None, log_every: int = 0) -> list:
    """GRPO over a task suite; returns the per-step metric history.

    Every step snapshots the current policy, rolls out one group for the
    next task (round robin), and applies one update.  Fully deterministic
    under a fixed seed.
    """
    rng = seeding.rng_for(seed, "visrl", "rollouts")
    history = []
    for step in range(steps):
        task = tasks[step % len(tasks)]
        old = snapshot_policy(state)
        group = rollout_group(state, tok_state, rend_state, task, batch, rng, order)
        m = grpo_step(state, old, group, lam)
        m["step"] = step
        m["prompt"] = " ".join(task.prompt_names)
        history.append(m)
        if log_every and (step + 1) % log_every == 0:
            recent = np.mean([h["reward_mean"] for h in history[-log_every:]])
            print(f"rl step {step + 1}: reward {recent:.3f}")
    return history


def write_metrics_log(path, history) -> None:
    with open(path, "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, separators=(",", ":"), sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# SFT corpus for the RL tasks


def build_sft_data(tok_state, tasks, per_task: int, seed: int) -> tuple:
    """(prompt name tuples, token grid, images) for count/color scenes."""
    rng = seeding.rng_for(seed, "visrl", "sft-scenes")
    prompts, images = [], []
    for task in tasks:
        for _ in range(per_task):
            spec = scene_for_task(rng, task)
            prompts.append(task.prompt_names)
            images.append(scenes.render_scene(spec))
    images = np.stack(images)
    grid = tokenizer.tokenize(tok_state, images)
    return prompts, grid, images


def sft_corpus(vocab: am.Vocabulary, prompt_names, token_grid,
               null_fraction: float = 0.2, seed: int = 0,
               order=None) -> np.ndarray:
    grid = np.asarray(token_grid)
    if order is not None:
        grid = grid[:, np.asarray(order)]
    prompts = [[vocab.names.index(n) for n in names] for names in prompt_names]
    rng = seeding.rng_for(seed, "visrl", "null-mask")
    return am.t2i_corpus(vocab, prompts, grid, null_fraction=null_fraction, rng=rng)


# ---------------------------------------------------------------------------
# ordering harness


def ordering_harness(tok_state, rend_state, train_tasks, eval_tasks,
                     orders: dict, sft_per_task: int = 12, sft_steps: int = 300,
                     rl_steps: int = 40, batch: int = 8, seed: int = 0,
                     ar_cfg: am.ARConfig | None = None,
                     samples_per_task: int = 8, log_every: int = 0) -> dict:
    """Run the same SFT + RL budget once per token ordering.

    Everything except the ordering is pinned: scene corpus, seeds, model
    size, and step budgets are shared, so reward differences are
    attributable to how the target sequence was permuted.
    """
    vocab = am.Vocabulary(tok_state.cfg.codebook_size)
    cfg = ar_cfg or am.ARConfig()
    prompt_names, grid, _ = build_sft_data(tok_state, train_tasks, sft_per_task, seed)
    results = {}
    for name, order in orders.items():
        ar = am.init_ar(seed, vocab, cfg)
        seqs = sft_corpus(vocab, prompt_names, grid, seed=seed, order=order)
        am.train_ar(ar, seqs, sft_steps, seed=seed)
        baseline = evaluate_tasks(ar, tok_state, rend_state, eval_tasks,
                                  samples_per_task, seed, order)
        history = rl_train(ar, tok_state, rend_state, train_tasks, rl_steps,
                           batch=batch, seed=seed, order=order, log_every=log_every)
        final = evaluate_tasks(ar, tok_state, rend_state, eval_tasks,
                               samples_per_task, seed, order)
        results[name] = {"baseline": baseline["mean"], "final": final["mean"],
                         "history": history}
    return results


# ---------------------------------------------------------------------------
# tabular MDPs and the Bellman verifier


@dataclasses.dataclass(frozen=True)
class TabularMDP:
    """Append-only MDP: s_{k+1} = s_k + (a,); reward only at the horizon."""
    horizon: int
    n_actions: int
    rewards: np.ndarray    # shape (n_actions,) * horizon, terminal rewards

    def __post_init__(self):
        if self.n_actions ** self.horizon > 200_000:
            raise ContractViolation(
                f"state space {self.n_actions}^{self.horizon} too large to enumerate")
        if self.rewards.shape != (self.n_actions,) * self.horizon:
            raise ContractViolation(
                f"reward table shape {self.rewards.shape} does not match MDP")


def random_mdp(rng: np.random.Generator, max_horizon: int = 4,
               max_actions: int = 5) -> tuple:
    """(mdp, policy): a random small MDP and a random stochastic policy."""
    h = int(rng.integers(2, max_horizon + 1))
    a = int(rng.integers(2, max_actions + 1))
    mdp = TabularMDP(h, a, rng.random(size=(a,) * h))
    policy = {}
    for depth in range(h):
        for prefix in itertools.product(range(a), repeat=depth):
            p = rng.random(a) + 0.05
            policy[prefix] = p / p.sum()
    return mdp, policy


def value_by_enumeration(mdp: TabularMDP, policy: dict) -> float:
    """E[terminal reward] by summing over every trajectory explicitly."""
    total = 0.0
    for traj in itertools.product(range(mdp.n_actions), repeat=mdp.horizon):
        prob = 1.0
        for depth in range(mdp.horizon):
            prob *= policy[traj[:depth]][traj[depth]]
        total += prob * float(mdp.rewards[traj])
    return total


def value_by_recursion(mdp: TabularMDP, policy: dict, prefix: tuple = ()) -> float:
    """Backward Bellman recursion V(s) = sum_a pi(a|s) [r(s+a) + V(s+a)].

    Intermediate rewards are zero; r is paid on reaching the horizon.
    """
    if len(prefix) == mdp.horizon:
        return 0.0
    value = 0.0
    probs = policy[prefix]
    for a in range(mdp.n_actions):
        nxt = prefix + (a,)
        r = float(mdp.rewards[nxt]) if len(nxt) == mdp.horizon else 0.0
        value += probs[a] * (r + value_by_recursion(mdp, policy, nxt))
    return value


def bellman_verify(mdp: TabularMDP, policy: dict) -> float:
    """|V(s0) by enumeration - V(s0) by recursion|."""
    return abs(value_by_enumeration(mdp, policy) - value_by_recursion(mdp, policy))
