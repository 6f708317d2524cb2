"""
Write seeded weight stores and inputs next to the fixture models.

Tests generate weights on the fly; these files are for driving the CLI by
hand with --weights and --input.
"""

import argparse
from pathlib import Path

import numpy as np

from codedinfer.core.model import init_weights, load_model
from codedinfer.core.types import DType
from codedinfer.core.weights import save_weights

FIXTURES = Path(__file__).resolve().parents[1] / "fixtures"


def main():
    parser = argparse.ArgumentParser(description="Generate fixture weights and inputs")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--dtype", choices=[d.value for d in DType], default="f32")
    parser.add_argument("--out", default=str(FIXTURES / "generated"))
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dtype = DType(args.dtype)
    for path in sorted((FIXTURES / "models").glob("*.json")):
        model = load_model(path)
        save_weights(init_weights(model, seed=args.seed, dtype=dtype), out / f"{path.stem}.cdcw")
        x = np.random.default_rng(args.seed).standard_normal(model.input_shape).astype(dtype.numpy)
        np.save(out / f"{path.stem}_input.npy", x)
        print(f"✓ Saved {path.stem} weights and input to {out}")


if __name__ == "__main__":
    main()
