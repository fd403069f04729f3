"""Train one toy model and print held-out retrieval / token-alignment numbers."""

import argparse
import time

from dap.corpus import LanguageSpec, generate_corpus, split_heldout
from dap.model import EncoderConfig, init_params
from dap.objectives import TrainConfig
from dap.pipeline import evaluate, train


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--objective", default="dap")
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--rho", type=float, default=1.0)
    ap.add_argument("--direction", default="xx->en")
    ap.add_argument("--K", type=int, default=2)
    ap.add_argument("--n-pairs", type=int, default=5000)
    ap.add_argument("--lr", type=float, default=3e-4)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    spec = LanguageSpec(seed=args.seed)
    train_pairs, held = split_heldout(generate_corpus(spec, args.n_pairs))
    params = init_params(EncoderConfig(V=spec.vocab_size, K=args.K, seed=args.seed))
    cfg = TrainConfig(objective=args.objective, steps=args.steps, rho=args.rho, direction=args.direction,
                      lr=args.lr, seed=args.seed)
    t0 = time.time()
    res = train(params, train_pairs, cfg, log_interval=max(1, args.steps // 10),
                on_log=lambda e: print(e, flush=True))
    print(f"trained in {time.time() - t0:.1f}s")
    for task in ("retrieval", "token-align"):
        print(task, evaluate(res.params, held, task))


if __name__ == "__main__":
    main()
