"""Closed-form cost of the bias path for naive vs. axially decomposed BoxRPB.

One FLOP is counted per multiply and per add of a multiply-add pair; bias
additions of the linear layers are ignored. Only the bias path is modelled
since the attention itself is identical across variants. Activation bytes
count the hidden-layer tensor at 32-bit precision and are not comparable to
whole-training memory footprints.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

CSV_HEADER = ("variant", "K", "H", "W", "M", "h", "flops", "activation_bytes")
BYTES_PER_ELEMENT = 4


@dataclass(frozen=True)
class FlopReport:
    variant: str
    K: int
    H: int
    W: int
    M: int
    h: int
    flops: int
    activation_bytes: int

    def row(self) -> tuple:
        return (self.variant, self.K, self.H, self.W, self.M, self.h, self.flops, self.activation_bytes)


def boxrpb_flops(K: int, H: int, W: int, M: int, h: int) -> tuple[FlopReport, FlopReport]:
    for name, v in dict(K=K, H=H, W=W, M=M, h=h).items():
        if int(v) != v or v < 1:
            raise ValueError(f"{name} must be a positive integer, got {v}")
    naive = 2 * K * H * W * (4 * h + h * M)
    decomposed_mlp = 2 * K * (H + W) * (2 * h + h * M)
    decomposed = decomposed_mlp + K * H * W * M
    return (
        FlopReport("naive", K, H, W, M, h, naive, K * H * W * h * BYTES_PER_ELEMENT),
        FlopReport("decomposed", K, H, W, M, h, decomposed, K * (H + W) * h * BYTES_PER_ELEMENT),
    )


def mlp_flop_ratio(H: int, W: int, M: int) -> float:
    """Naive over decomposed MLP FLOPs; independent of K and h."""
    return H * W * (4 + M) / ((H + W) * (2 + M))


def mlp_flops_decomposed(K: int, H: int, W: int, M: int, h: int) -> int:
    return 2 * K * (H + W) * (2 * h + h * M)


REFERENCE_SHAPE = dict(K=300, H=50, W=84, M=8, h=256)
TOY_SHAPE = dict(K=16, H=8, W=8, M=4, h=64)


def flops_csv(shapes: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for s in shapes:
        for rep in boxrpb_flops(**s):
            w.writerow(rep.row())
    return buf.getvalue()
