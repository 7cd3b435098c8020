"""Frame and flow enumeration for a disjoint pair of blurry inputs.

Positions are indices into the contiguous sequence of 2N reconstructed
latent frames: the first input's window occupies positions 0..N-1 with its
reference (middle) frame at N//2, the second occupies N..2N-1 with its
reference at N + N//2.  Flows are enumerated as every non-middle position
toward the first reference, then every non-middle position toward the
second, which gives the 2*(2N) - 4 flows the losses and outputs use.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError


@dataclass(frozen=True)
class FrameIndexing:
    n: int

    def __post_init__(self):
        if self.n < 3 or self.n % 2 == 0:
            raise ConfigError(f"frames per blur must be odd and >= 3, got {self.n}")

    @property
    def half(self) -> int:
        return self.n // 2

    @property
    def n_total(self) -> int:
        return 2 * self.n

    @property
    def ref_positions(self) -> tuple[int, int]:
        return (self.half, self.n + self.half)

    @property
    def nonmiddle(self) -> tuple[int, ...]:
        refs = set(self.ref_positions)
        return tuple(i for i in range(self.n_total) if i not in refs)

    @property
    def pairs(self) -> tuple[tuple[int, int], ...]:
        """(source position, reference position) in canonical order."""
        r0, r1 = self.ref_positions
        nm = self.nonmiddle
        return tuple((s, r0) for s in nm) + tuple((s, r1) for s in nm)

    @property
    def n_flows(self) -> int:
        return 2 * (self.n_total - 2)

    def pair_index(self, src: int, ref: int) -> int:
        """Position of a (source, reference) pair in the canonical order."""
        try:
            return self.pairs.index((src, ref))
        except ValueError:
            raise ConfigError(f"({src} -> {ref}) is not an estimated flow pair") from None

    def window(self, which: int) -> range:
        """Positions covered by input 0 or input 1."""
        if which not in (0, 1):
            raise ConfigError(f"window index must be 0 or 1, got {which}")
        return range(which * self.n, (which + 1) * self.n)

    def ordering_rule_pairs(self) -> dict[str, int]:
        """Canonical indices of the four extremum flows the ordering rule reads.

        Keys name the flow by (source extremum -> opposite reference):
        ``first_early`` / ``first_late`` compare for the first input,
        ``second_early`` / ``second_late`` for the second.
        """
        r0, r1 = self.ref_positions
        return {
            "first_early": self.pair_index(0, r1),
            "first_late": self.pair_index(self.n - 1, r1),
            "second_early": self.pair_index(self.n, r0),
            "second_late": self.pair_index(self.n_total - 1, r0),
        }
