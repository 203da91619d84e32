#!/usr/bin/env python3
"""Benchmark the candidate-scoring kernels: compiled extension vs fallback.

Builds default-sized models, scores batches of random candidate masks
against every head column, and reports per-call times plus the speedup.
Both backends are checked to produce the same numbers while being timed.

Usage:
    python3 benchmarks/bench_kernels.py [--sizes 64,512,4096] [--repeat 5]
"""

import argparse
import time

import numpy as np

from charcd import kernels
from charcd.autodiff import Rng
from charcd.corpus import CharVocab, FeatureSchema
from charcd.decomposition import cnn_kernel_context, lstm_kernel_context
from charcd.kernels import fallback
from charcd.models import CnnConfig, LstmConfig, TaggerModel, init_params

WORD = "benchmarking"


def build_model(arch: str) -> TaggerModel:
    schema = FeatureSchema(language="bench", classes=(
        ("Number", ("NA", "Sing", "Plur")),
        ("Case", ("NA", "Nom", "Gen", "Par")),
        ("Tense", ("NA", "Pres", "Past")),
    ))
    chars = tuple(sorted(set("abcdefghijklmnopqrstuvwxyz")))
    vocab = CharVocab(chars=chars, char_counts={c: 2 for c in chars})
    config = CnnConfig() if arch == "cnn" else LstmConfig()
    params = init_params(arch, config, schema, vocab.size, Rng(0))
    majority = {name: labels[0] for name, labels in schema.classes}
    return TaggerModel(arch=arch, config=config, schema=schema, vocab=vocab,
                       params=params, majority=majority)


def head_columns(model: TaggerModel) -> np.ndarray:
    return np.concatenate([model.head(name)[0]
                           for name in model.schema.class_names], axis=1)


def time_call(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench(arch: str, sizes, repeat: int, compiled) -> None:
    model = build_model(arch)
    ids = model.encode(WORD)
    ctx = (cnn_kernel_context(model, ids) if arch == "cnn"
           else lstm_kernel_context(model, ids))
    score = (kernels.cnn_cd_scores if arch == "cnn"
             else kernels.lstm_cd_scores)
    wcols = head_columns(model)
    rng = np.random.default_rng(0)
    print(f"\n{arch}: seq_len {len(ids)}, {wcols.shape[0]} features, "
          f"{wcols.shape[1]} head columns")
    header = f"{'masks':>8s} {'fallback':>12s}"
    if compiled is not None:
        header += f" {'compiled':>12s} {'speedup':>8s}"
    print(header)
    for m in sizes:
        masks = rng.random((m, len(ids))) < 0.4
        t_fb = time_call(lambda: score(ctx, masks, wcols, impl=fallback),
                         repeat)
        line = f"{m:8d} {1e3 * t_fb:10.2f}ms"
        if compiled is not None:
            t_c = time_call(lambda: score(ctx, masks, wcols, impl=compiled),
                            repeat)
            a = score(ctx, masks, wcols, impl=fallback)
            b = score(ctx, masks, wcols, impl=compiled)
            drift = float(np.max(np.abs(a - b))) if a.size else 0.0
            line += (f" {1e3 * t_c:10.2f}ms {t_fb / t_c:7.1f}x"
                     f"   (max diff {drift:.1e})")
        print(line)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", default="64,512,4096",
                        help="comma list of candidate batch sizes")
    parser.add_argument("--repeat", type=int, default=5,
                        help="timing repetitions (best is reported)")
    parser.add_argument("--arch", choices=("cnn", "bilstm", "both"),
                        default="both")
    args = parser.parse_args()
    sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    try:
        from charcd.kernels import _fastcd as compiled
    except ImportError:
        compiled = None
        print("compiled extension not built; timing the fallback only")
    print(f"active backend: {kernels.backend_name()}")
    archs = ("cnn", "bilstm") if args.arch == "both" else (args.arch,)
    for arch in archs:
        bench(arch, sizes, args.repeat, compiled)


if __name__ == "__main__":
    main()
