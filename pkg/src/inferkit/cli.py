"""Command-line front end.

Exit codes: 0 success, 1 runtime or data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
import time
from fractions import Fraction
from importlib import resources
from pathlib import Path

import numpy as np

from . import kernels
from .batcher import QueryPool, StaticBatcher, parse_arrivals, run_schedule
from .checkpoint import (
    Checkpoint,
    load_checkpoint,
    quantize_checkpoint,
    random_checkpoint,
    read_native,
    read_safetensors,
    save_native,
)
from .engine import Engine, Model
from .errors import ConfigurationError, InferkitError, PlanningError, SchemeError
from .modelspec import ModelSpec, load_spec
from .partition import CostModel, estimate, parse_grid, plan
from .quant import QuantScheme, bits_per_weight, block_error_stats
from .sampler import STRATEGIES, SamplerPolicy
from .speculative import ModelDistribution, NgramDraft, SpecConfig, estimate_speedup, speculative_generate
from .tensorcore import WeightMatrix
from .tokenizer import Tokenizer

DEMO_BLOCK = [-1, -0.9, -0.6, -0.4, -0.2, 0, 0.1, 0.5, 0.7, 1, 1.3, 1.5]


class UsageError(Exception):
    pass


def data_path(name: str) -> Path:
    return Path(str(resources.files("inferkit") / "data" / name))


def _fmt(x) -> str:
    return f"{float(x):.6g}" if isinstance(x, (Fraction, float)) else str(x)


def _bpw(scheme: QuantScheme) -> str:
    return str(float(bits_per_weight(scheme)))


class Report:
    """Collects output lines; timings are dropped under --no-timing."""

    def __init__(self, command: str, timing: bool):
        self.lines = [f"command: {command}"]
        self.timing = timing
        self.start = time.perf_counter()

    def add(self, line: str = "") -> None:
        self.lines.append(line)

    def finish(self) -> str:
        if self.timing:
            self.add(f"elapsed: {time.perf_counter() - self.start:.3f} s")
        return "\n".join(self.lines) + "\n"


# --------------------------------------------------------------------------
# shared plumbing


def _load_spec(args) -> ModelSpec:
    if not args.model_spec:
        raise UsageError("--model-spec is required")
    path = Path(args.model_spec)
    if not path.exists():
        builtin = data_path(args.model_spec)
        if not builtin.exists():
            raise UsageError(f"model spec not found: {args.model_spec}")
        path = builtin
    return load_spec(path)


def _load_weights(args, spec: ModelSpec) -> tuple[Checkpoint, str]:
    if getattr(args, "weights", None):
        if not Path(args.weights).exists():
            raise UsageError(f"weights file not found: {args.weights}")
        return load_checkpoint(args.weights, spec), f"file {args.weights}"
    seed = args.random_seed if args.random_seed is not None else 0
    return random_checkpoint(spec, seed), f"random seed {seed}"


def _policy(args, spec: ModelSpec) -> SamplerPolicy:
    base = SamplerPolicy.from_mapping(spec.generation_defaults())
    overrides = {
        "strategy": args.strategy, "top_k": args.top_k, "top_p": args.top_p, "temperature": args.temp,
        "alpha": args.alpha, "tfs_z": args.tfs_z, "target_surprise": args.mirostat_tau,
        "learning_rate": args.mirostat_eta, "t_random": args.t_random, "seed": args.seed,
    }
    values = {k: str(v) for k, v in overrides.items() if v is not None}
    try:
        return SamplerPolicy.from_mapping(values, base)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _describe_policy(p: SamplerPolicy) -> str:
    keys = {
        "greedy": (), "top_k": ("top_k",), "top_p": ("top_p",), "temperature": (), "typical": ("top_p",),
        "min_p": ("alpha",), "tfs": ("tfs_z",), "fsd": ("alpha", "top_k"),
        "fsd_random": ("alpha", "top_k", "t_random"), "mirostat": ("target_surprise", "learning_rate"),
    }[p.strategy]
    parts = [f"strategy={p.strategy}"] + [f"{k}={getattr(p, k)}" for k in keys]
    if p.strategy not in ("greedy", "fsd"):
        parts += [f"temperature={p.temperature}", f"seed={p.seed}"]
    return " ".join(parts)


def _prompt_ids(args, spec: ModelSpec, tok: Tokenizer) -> list[int]:
    if args.prompt_ids:
        try:
            ids = [int(t) for t in args.prompt_ids.split(",") if t.strip()]
        except ValueError:
            raise UsageError("--prompt-ids takes comma-separated integers") from None
    else:
        ids = tok.encode(args.prompt)
    if not ids:
        raise UsageError("prompt is empty")
    if max(ids) >= spec.vocab_size or min(ids) < 0:
        raise UsageError(f"prompt token ids must lie in [0, {spec.vocab_size})")
    return ids


def _start_token(spec: ModelSpec, tok: Tokenizer) -> int:
    bos = tok.vocab.bos
    return bos if bos is not None and bos < spec.vocab_size else 0


def _eos(spec: ModelSpec, tok: Tokenizer) -> int | None:
    eos = tok.vocab.eos
    return eos if eos < spec.vocab_size else None


def _text(tok: Tokenizer, ids) -> str:
    text = tok.decode([i for i in ids if i < len(tok.vocab)])
    return text.encode("unicode_escape").decode("ascii")


# --------------------------------------------------------------------------
# commands


def cmd_quantize(args) -> str:
    rep = Report("quantize", not args.no_timing)
    if args.demo_table2:
        rep.add("demo block: " + " ".join(_fmt(w) for w in DEMO_BLOCK))
        rep.add(f"{'scheme':<8}{'codes':<40}avg_error")
        from .quant import quantize_block

        for name in ("Q4", "Q3", "Q3H"):
            scheme = QuantScheme.parse(name)
            blk = quantize_block(DEMO_BLOCK, scheme, any_length=True)
            stats = block_error_stats(DEMO_BLOCK, scheme, any_length=True)
            codes = ",".join(str(int(d)) for d in blk.digits())
            rep.add(f"{name:<8}{codes:<40}{stats.avg_error:.3f}")
        return rep.finish()

    try:
        scheme = QuantScheme.parse(args.scheme) if args.block_size is None else QuantScheme(
            QuantScheme.parse(args.scheme).codec, args.block_size
        )
    except SchemeError as e:
        raise UsageError(str(e)) from None
    if not args.out:
        raise UsageError("--out is required")

    if args.input:
        path = Path(args.input)
        if not path.exists():
            raise UsageError(f"input file not found: {args.input}")
        if path.read_bytes()[:4] == b"IKNT":
            tensors, _ = read_native(path)
        else:
            raw, _ = read_safetensors(path)
            tensors = {n: WeightMatrix.from_array(a.astype(np.float32)) if a.ndim == 2 else a.astype(np.float32)
                       for n, a in raw.items()}
        source = f"file {args.input}"
    elif args.model_spec:
        spec = _load_spec(args)
        seed = args.random_seed or 0
        tensors = random_checkpoint(spec, seed).tensors
        source = f"random checkpoint for {args.model_spec}, seed {seed}"
    else:
        rows, cols = _parse_shape(args.random_shape)
        rng = np.random.default_rng(args.random_seed or 0)
        tensors = {"weight": WeightMatrix.from_array(rng.standard_normal((rows, cols)).astype(np.float32))}
        source = f"random {rows}x{cols} gaussian, seed {args.random_seed or 0}"

    ckpt, skipped = quantize_checkpoint(Checkpoint(tensors), scheme)
    rep.add(f"source: {source}")
    rep.add(f"scheme: {scheme.name}  bits/weight: {_bpw(scheme)}")
    rep.add(f"{'tensor':<32}{'dims':<12}{'stored':<10}{'avg_error':<12}bits/weight")
    for name in sorted(ckpt.tensors):
        orig, new = tensors[name], ckpt.tensors[name]
        if not isinstance(orig, WeightMatrix):
            continue
        dims = f"{orig.rows}x{orig.cols}"
        if name in skipped:
            rep.add(f"{name:<32}{dims:<12}{orig.storage:<10}{'-':<12}{32 if orig.storage == 'fp32' else 16}")
            continue
        err = float(np.mean(np.abs(orig.dense().astype(np.float64) - new.dense())))
        rep.add(f"{name:<32}{dims:<12}{scheme.name:<10}{err:<12.6f}{_bpw(scheme)}")
    save_native(args.out, ckpt.tensors)
    rep.add(f"wrote {args.out} ({Path(args.out).stat().st_size} bytes)")
    return rep.finish()


def _parse_shape(text: str) -> tuple[int, int]:
    try:
        rows, cols = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"--random-shape looks like ROWSxCOLS, got {text!r}") from None
    return rows, cols


def _engine_for(args):
    spec = _load_spec(args)
    if spec.network_type == "encoder_only":
        raise UsageError("encoder-only models do not generate")
    ckpt, source = _load_weights(args, spec)
    return spec, Model.from_checkpoint(spec, ckpt), source


def cmd_generate(args) -> str:
    rep = Report("generate", not args.no_timing)
    spec, model, source = _engine_for(args)
    tok = Tokenizer.for_spec(spec)
    policy = _policy(args, spec)
    ids = _prompt_ids(args, spec, tok)
    engine = Engine(model, max_slots=1)
    encoder_input = None
    if spec.network_type == "encoder_decoder":
        encoder_input, ids = ids, [_start_token(spec, tok)]
    rep.add(f"spec: {args.model_spec}")
    rep.add(f"weights: {source}")
    rep.add(f"policy: {_describe_policy(policy)}")
    rep.add(f"kernels: {kernels.BACKEND}")
    if encoder_input is not None:
        rep.add("encoder ids: " + " ".join(map(str, encoder_input)))
    rep.add("prompt ids: " + " ".join(map(str, ids)))
    pool = QueryPool(engine, capacity=1, eos=_eos(spec, tok))
    new = min(args.max_new_tokens, spec.max_context - len(ids))
    if new < 1:
        raise UsageError("prompt leaves no room below max_context")
    pool.add_query(ids, policy, new, encoder_input=encoder_input)
    out = pool.drain()[0]
    rep.add("tokens: " + " ".join(map(str, out)))
    rep.add(f"text: {_text(tok, out)}")
    return rep.finish()


def _schedule_lines(log, names) -> list[str]:
    lines = []
    for step, emitted in log:
        cells = "  ".join(f"{names[q]}:{t}" for q, t in emitted) or "-"
        lines.append(f"T{step}: {cells}")
    return lines


def cmd_batch_demo(args) -> str:
    rep = Report("batch-demo", not args.no_timing)
    spec, model, source = _engine_for(args)
    if spec.network_type != "decoder_only":
        raise UsageError("batch-demo drives decoder_only models")
    tok = Tokenizer.for_spec(spec)
    policy = _policy(args, spec)
    path = Path(args.arrivals) if args.arrivals else data_path("demo_arrivals.tsv")
    if not path.exists():
        raise UsageError(f"arrivals file not found: {path}")
    arrivals = parse_arrivals(path.read_text(encoding="utf-8"))
    names = {i: f"S{i + 1}" for i in range(len(arrivals))}
    rep.add(f"spec: {args.model_spec}")
    rep.add(f"weights: {source}")
    rep.add(f"policy: {_describe_policy(policy)}")
    rep.add(f"capacity: {args.capacity}")
    for i, a in enumerate(arrivals):
        rep.add(f"{names[i]}: arrives T{a.step}, max_new_tokens {a.max_new_tokens or args.max_new_tokens}, prompt {a.prompt!r}")
    first = {}
    for label, cls in (("dynamic", QueryPool), ("static", StaticBatcher)):
        pool = cls(Engine(model, max_slots=args.capacity), capacity=args.capacity)
        log = run_schedule(pool, arrivals, tok.encode, args.max_new_tokens, policy)
        rep.add(f"{label} batching:")
        rep.lines += ["  " + line for line in _schedule_lines(log, names)]
        first[label] = {}
        for step, emitted in log:
            for q, _ in emitted:
                first[label].setdefault(q, step)
    rep.add("first-token step (dynamic / static):")
    for q in sorted(first["dynamic"]):
        rep.add(f"  {names[q]}: T{first['dynamic'][q]} / T{first['static'][q]}")
    return rep.finish()


def cmd_partition_plan(args) -> str:
    rep = Report("partition-plan", not args.no_timing)
    try:
        grid = parse_grid(args.grid) if args.grid else None
        p = plan(args.strategy, args.layers, args.heads, args.devices, grid)
    except PlanningError as e:
        raise UsageError(str(e)) from None
    cost = CostModel(args.t_layer, args.t_merge_base, args.t_merge_per_device, args.t_hop)
    rep.add(f"strategy: {p.strategy}  grid: {p.pipeline_stages}x{p.tensor_groups}  layers: {p.n_layers}  heads: {p.n_heads}")
    rep.add("")
    rep.lines += p.to_text().rstrip("\n").split("\n")
    rep.add("")
    rep.add(f"cost model: t_layer={cost.t_layer_compute} t_merge(g)={cost.merge_base}+{cost.merge_per_device}*(g-1) "
            f"t_hop={cost.t_hop} units/s={cost.units_per_second}")
    rep.add(f"{'partition':<14}{'grid':<8}{'throughput':>12}{'decode':>10}")
    candidates = [("layer_wise", None), ("tensor_wise", None)]
    if grid is not None:
        candidates.append(("hybrid", grid))
    elif p.strategy == "hybrid":
        candidates.append(("hybrid", (p.pipeline_stages, p.tensor_groups)))
    for strat, g in candidates:
        try:
            q = plan(strat, args.layers, args.heads, args.devices, g)
        except InferkitError:
            continue
        est = estimate(q, cost, args.batch_size)
        mark = " *" if strat == p.strategy else ""
        rep.add(f"{strat:<14}{q.pipeline_stages}x{q.tensor_groups:<6}{est.throughput:>12.2f}{est.decode_speed:>10.2f}{mark}")
    rep.add("(tokens/s under the cost model; * = requested plan)")
    return rep.finish()


def _param_count(model: Model) -> int:
    return sum(int(np.prod(t.shape)) for t in model.weights.values())


def cmd_spec_decode(args) -> str:
    rep = Report("spec-decode", not args.no_timing)
    spec, model, source = _engine_for(args)
    if spec.network_type != "decoder_only":
        raise UsageError("spec-decode drives decoder_only models")
    tok = Tokenizer.for_spec(spec)
    ids = _prompt_ids(args, spec, tok)
    temp = args.temp if args.temp is not None else 1.0
    target = ModelDistribution(model, temp)
    if args.draft == "ngram":
        draft = NgramDraft(spec.vocab_size)
        t_draft = 0.0 if args.t_draft is None else args.t_draft
        draft_desc = "2-gram over the prefix"
    elif args.draft.startswith("model:"):
        dspec = load_spec(args.draft[6:]) if Path(args.draft[6:]).exists() else load_spec(data_path(args.draft[6:]))
        if dspec.vocab_size != spec.vocab_size:
            raise UsageError("draft and target must share a vocabulary")
        dseed = args.draft_seed if args.draft_seed is not None else (args.random_seed or 0)
        dmodel = Model.from_checkpoint(dspec, random_checkpoint(dspec, dseed))
        draft = ModelDistribution(dmodel, temp)
        t_draft = _param_count(dmodel) / _param_count(model) if args.t_draft is None else args.t_draft
        draft_desc = f"model {args.draft[6:]} (random seed {dseed})"
    else:
        raise UsageError("--draft is 'ngram' or 'model:<spec>'")
    if args.accept == "strict":
        cfg = SpecConfig(args.lookahead, "strict", seed=args.seed or 0)
    elif args.accept.startswith("topk:"):
        cfg = SpecConfig(args.lookahead, "top_sampling", pool_k=int(args.accept[5:]), seed=args.seed or 0)
    elif args.accept.startswith("topp:"):
        cfg = SpecConfig(args.lookahead, "top_sampling", pool_p=float(args.accept[5:]), seed=args.seed or 0)
    else:
        raise UsageError("--accept is strict, topk:<k> or topp:<p>")
    n_total = min(len(ids) + args.max_new_tokens, spec.max_context)
    seq, stats = speculative_generate(target, draft, ids, n_total, cfg)
    out = seq[len(ids):]
    rep.add(f"spec: {args.model_spec}")
    rep.add(f"weights: {source}")
    rep.add(f"draft: {draft_desc}")
    rep.add(f"lookahead: {cfg.lookahead}  acceptance: {args.accept}  temperature: {temp}  seed: {cfg.seed}")
    rep.add("prompt ids: " + " ".join(map(str, ids)))
    rep.add("tokens: " + " ".join(map(str, out)))
    rep.add(f"text: {_text(tok, out)}")
    rep.add(f"proposed: {stats.proposed}  accepted: {stats.accepted}  iterations: {stats.iterations}")
    rep.add(f"r: {stats.rate:.2f}")
    t_target = 1.0
    expected = estimate_speedup(stats.rate, cfg.lookahead, t_draft, t_target, len(out))
    baseline = len(out) * t_target
    speedup = baseline / expected if expected not in (0, float("inf")) else 0.0
    rep.add(f"estimated time: {expected:.3f} target-steps (t_draft={t_draft:.3g}, t_target={t_target})  speedup: {speedup:.2f}x")
    return rep.finish()


# --------------------------------------------------------------------------
# parser


def _add_model_args(p):
    p.add_argument("--model-spec", help="spec file path or name of a bundled spec (e.g. tiny.spec)")
    p.add_argument("--weights", help="checkpoint file (format from the spec)")
    p.add_argument("--random-seed", type=int, help="use seeded random weights (default 0)")
    p.add_argument("--threads", type=int, help="kernel threads (default INFERKIT_THREADS or 1)")
    p.add_argument("--no-timing", action="store_true", help="omit timings so reports are byte-stable")


def _add_policy_args(p):
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--top-k", type=int)
    p.add_argument("--top-p", type=float)
    p.add_argument("--temp", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--tfs-z", type=float)
    p.add_argument("--mirostat-tau", type=float)
    p.add_argument("--mirostat-eta", type=float)
    p.add_argument("--t-random", type=int)
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="inferkit", description="desk-scale transformer inference")
    sub = ap.add_subparsers(dest="command", required=True)

    q = sub.add_parser("quantize", help="quantize a tensor container")
    q.add_argument("--demo-table2", action="store_true", help="quantize the 12-weight demo block at 4, 3 and 3.5 bits")
    q.add_argument("--scheme", default="Q4", help="Q8, Q6, Q5, Q4, Q3H, Q3, Q2 or FP16; optional _B32/_B64 suffix")
    q.add_argument("--block-size", type=int)
    q.add_argument("--input", help="native or safetensors file")
    q.add_argument("--random-shape", default="4x64", help="shape of the random tensor when no input is given")
    q.add_argument("--out")
    _add_model_args(q)
    q.set_defaults(func=cmd_quantize)

    g = sub.add_parser("generate", help="generate tokens from a prompt")
    _add_model_args(g)
    _add_policy_args(g)
    g.add_argument("--prompt", default="hello")
    g.add_argument("--prompt-ids", help="comma-separated token ids instead of --prompt")
    g.add_argument("--max-new-tokens", type=int, default=16)
    g.set_defaults(func=cmd_generate)

    b = sub.add_parser("batch-demo", help="replay an arrival schedule with dynamic and static batching")
    _add_model_args(b)
    _add_policy_args(b)
    b.add_argument("--arrivals", help="file of 'step<TAB>prompt[<TAB>max_new_tokens]' lines")
    b.add_argument("--capacity", type=int, default=8)
    b.add_argument("--max-new-tokens", type=int, default=4)
    b.set_defaults(func=cmd_batch_demo)

    pp = sub.add_parser("partition-plan", help="print a device assignment table and cost estimates")
    pp.add_argument("--strategy", choices=("layer_wise", "tensor_wise", "hybrid"), required=True)
    pp.add_argument("--layers", type=int, required=True)
    pp.add_argument("--heads", type=int, required=True)
    pp.add_argument("--devices", type=int, required=True)
    pp.add_argument("--grid", help="STAGESxGROUPS, required for hybrid")
    pp.add_argument("--batch-size", type=int, default=1)
    pp.add_argument("--t-layer", type=float, default=CostModel.t_layer_compute)
    pp.add_argument("--t-merge-base", type=float, default=CostModel.merge_base)
    pp.add_argument("--t-merge-per-device", type=float, default=CostModel.merge_per_device)
    pp.add_argument("--t-hop", type=float, default=CostModel.t_hop)
    pp.add_argument("--threads", type=int)
    pp.add_argument("--no-timing", action="store_true")
    pp.set_defaults(func=cmd_partition_plan)

    s = sub.add_parser("spec-decode", help="speculative sampling with a draft model")
    _add_model_args(s)
    s.add_argument("--draft", default="ngram", help="'ngram' or 'model:<spec>'")
    s.add_argument("--draft-seed", type=int, help="random seed for a model draft (default: --random-seed)")
    s.add_argument("--lookahead", type=int, default=4)
    s.add_argument("--accept", default="strict", help="strict, topk:<k> or topp:<p>")
    s.add_argument("--temp", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--t-draft", type=float, help="draft step cost relative to a target step")
    s.add_argument("--prompt", default="hello")
    s.add_argument("--prompt-ids")
    s.add_argument("--max-new-tokens", type=int, default=16)
    s.set_defaults(func=cmd_spec_decode)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    saved = kernels.get_num_threads()
    if getattr(args, "threads", None):
        kernels.set_num_threads(args.threads)
    try:
        sys.stdout.write(args.func(args))
        return 0
    except (UsageError, ConfigurationError) as e:
        print(f"inferkit {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (InferkitError, OSError, ValueError) as e:
        print(f"inferkit {args.command}: error: {e}", file=sys.stderr)
        return 1
    finally:
        kernels.set_num_threads(saved)


if __name__ == "__main__":
    sys.exit(main())
