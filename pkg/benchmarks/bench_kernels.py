"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--atoms 12] [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from molbuild import kernels
from molbuild.energy import MorseParams


def cases(atoms: int, rng: np.random.Generator):
    pos = rng.uniform(0, 0.8 * atoms ** (1 / 3) * 1.5, (atoms, 3))
    numbers = rng.choice([1, 6, 7, 8], atoms).astype(np.intp)
    params = MorseParams.default()
    tables = (params.well_depth, params.width, params.r0)
    values = rng.standard_normal((atoms * 20, 128))
    index = rng.integers(0, atoms, atoms * 20).astype(np.intp)
    xf, xn1, xn2 = pos[0], pos[1], pos[2]
    return {
        "segment_sum": lambda k: k.segment_sum(values, index, atoms),
        "pair_graph": lambda k: k.pair_graph(pos, 5.0),
        "morse_energy": lambda k: k.morse_energy(pos, numbers, *tables),
        "morse_energy_grad": lambda k: k.morse_energy_grad(pos, numbers, *tables),
        "place_atom": lambda k: k.place_atom(xf, xn1, xn2, 3, 1.2, 1.9, 0.7),
        "measure_internal": lambda k: k.measure_internal(xf, xn1, xn2, 3, pos[3]),
    }


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--atoms", type=int, default=12)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    backends = kernels.available_backends()
    if "compiled" not in backends:
        print("compiled extension not built; only the fallback is timed")
    funcs = cases(args.atoms, np.random.default_rng(0))
    names = list(backends)
    print(f"{'kernel':<20}" + "".join(f"{n + ' (us)':>16}" for n in names) + f"{'speedup':>10}")
    for name, fn in funcs.items():
        times = {}
        for backend in names:
            module = backends[backend]
            timer = timeit.Timer(lambda: fn(module))
            number, _ = timer.autorange()
            times[backend] = min(timer.repeat(args.repeat, number)) / number * 1e6
        speed = times["python"] / times["compiled"] if "compiled" in times else float("nan")
        print(f"{name:<20}" + "".join(f"{times[b]:>16.2f}" for b in names) + f"{speed:>10.1f}x")


if __name__ == "__main__":
    main()
