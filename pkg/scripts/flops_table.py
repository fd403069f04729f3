"""Print forward FLOPs per sample for the three objective sets at 12-layer scale and
for the toy model, plus how the DAP overhead splits between head layers and the
vocabulary projection."""

from dap.evalkit import PAPER_SCALE, PAPER_SEQ_LEN, estimate_flops
from dap.model import EncoderConfig


def show(title, cfg, seq_len):
    rep = estimate_flops(cfg, seq_len)
    tr = rep.totals["tr"]
    print(f"{title} (S={seq_len})")
    for name, total in rep.totals.items():
        parts = ", ".join(f"{k}={v / 1e9:.3f}G" for k, v in rep.components[name].items())
        print(f"  {name:<7} {total / 1e9:8.3f}G  ({total / tr - 1:+.1%} vs TR)  [{parts}]")
    dap = rep.components["dap"]
    print(f"  DAP extra: head {dap['rtl_head'] / tr:.1%} of TR, vocabulary projection {dap['vocab_projection'] / tr:.1%}")


if __name__ == "__main__":
    show("12-layer, d=768, V=119547", PAPER_SCALE, PAPER_SEQ_LEN)
    show("toy", EncoderConfig(V=603), 15)
