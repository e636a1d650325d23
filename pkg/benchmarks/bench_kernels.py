"""Compare the compiled and pure-numpy kernel backends.

Times each hot kernel at training-sized shapes, then one DIN+CAPE training
epoch on the synthetic benchmark, under every available backend::

    python3 benchmarks/bench_kernels.py [--repeat 5] [--skip-epoch]
"""

import argparse
import timeit

import numpy as np

from caperec import kernels
from caperec.backbones import ModelConfig, build_model
from caperec.data import SyntheticSpec, Vocabulary, encode, generate_synthetic, make_batches
from caperec.position import PEConfig
from caperec.training import Adam


def kernel_cases(rng):
    # one batch of DIN+CAPE at the benchmark scale: 128 rows, context 30, n_max 30
    rows, n, positions = 128, 30, 31
    z = rng.normal(size=(rows, positions))
    p = rng.uniform(0, positions - 1, size=(rows, n))
    g = rng.normal(size=(rows, n))
    ids = rng.integers(0, 500, size=rows * n)
    src = rng.normal(size=(rows * n, 16))
    out = np.zeros((500, 16))
    return {
        "interp_gather": lambda: kernels.interp_gather(z, p),
        "interp_scatter": lambda: kernels.interp_scatter(z, p, g),
        "scatter_add_rows": lambda: kernels.scatter_add_rows(out, ids, src),
    }


def epoch_case():
    spec = SyntheticSpec(n_users=2000, n_items=500, n_intents=10, context_length_range=(10, 30))
    rows = generate_synthetic(spec).interactions
    vocab = Vocabulary.fit(rows)
    data = encode(rows, vocab, 30)
    cfg = ModelConfig(backbone="din", pe=PEConfig(variant="cape", d_pos=16, n_max=30), n_items=vocab.n_items,
                      n_cats=vocab.n_cats, emb_dim=16, attn_hidden=[32, 16], head_hidden=[32, 16])

    def epoch():
        model = build_model(cfg, 0)
        opt = Adam(model.parameters(), 3e-3)
        for batch in make_batches(data, 128, shuffle_seed=0):
            opt.zero_grad()
            model.loss(batch).backward()
            opt.step()

    return epoch


def best_of(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--number", type=int, default=50, help="calls per kernel timing")
    parser.add_argument("--skip-epoch", action="store_true")
    args = parser.parse_args(argv)

    backends = kernels.available_backends()
    if "compiled" not in backends:
        print("compiled extension not built; timing the python backend only")
    previous = kernels.BACKEND
    timings = {}
    try:
        for name in backends:
            kernels.set_backend(name)
            cases = kernel_cases(np.random.default_rng(0))
            for case, fn in cases.items():
                timings[(case, name)] = best_of(fn, args.repeat, args.number)
            if not args.skip_epoch:
                timings[("din+cape epoch", name)] = best_of(epoch_case(), 1 if args.repeat < 3 else 2, 1)
    finally:
        kernels.set_backend(previous)

    cases = list(dict.fromkeys(c for c, _ in timings))
    print(f"{'case':<18}" + "".join(f"{b:>14}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for case in cases:
        cols = [timings[(case, b)] for b in backends]
        line = f"{case:<18}" + "".join(f"{t * 1e3:>12.3f}ms" for t in cols)
        if len(cols) > 1:
            line += f"{cols[1] / cols[0]:>11.1f}x"
        print(line)


if __name__ == "__main__":
    main()
