"""Named, ordered parameter collections for one model part."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class ParamSet:
    """Ordered name -> tensor mapping with part identity and round tag."""

    part: str
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    round_index: int = 0

    def names(self) -> list[str]:
        return list(self.tensors)

    def copy(self, round_index: int | None = None) -> "ParamSet":
        tag = self.round_index if round_index is None else round_index
        return ParamSet(self.part, {k: v.copy() for k, v in self.tensors.items()}, tag)

    def flat(self) -> np.ndarray:
        if not self.tensors:
            return np.zeros(0)
        return np.concatenate([v.reshape(-1) for v in self.tensors.values()])

    def count(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def same_structure(self, other: "ParamSet") -> bool:
        return (self.names() == other.names()
                and all(self.tensors[k].shape == other.tensors[k].shape for k in self.tensors))

    def equals(self, other: "ParamSet") -> bool:
        return (self.same_structure(other)
                and all(np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors))

    def allclose(self, other: "ParamSet", atol: float = 0.0, rtol: float = 0.0) -> bool:
        return (self.same_structure(other)
                and all(np.allclose(self.tensors[k], other.tensors[k], atol=atol, rtol=rtol)
                        for k in self.tensors))

    def max_abs_diff(self, other: "ParamSet") -> float:
        if not self.same_structure(other):
            raise ValueError("param sets differ in structure")
        diffs = [np.max(np.abs(self.tensors[k] - other.tensors[k])) if self.tensors[k].size else 0.0
                 for k in self.tensors]
        return float(max(diffs, default=0.0))
