"""Theoretical inference energy from FLOP counts and firing rates.

E = E_MAC * FL_stem + E_AC * T * (sum_n FL_conv^n * fr^n + sum_m FL_fc^m * fr^m)

The stem (the encoder's first conv, fed by real-valued pixels) pays the MAC
price once; every spike-consuming conv/fc layer pays AC energy scaled by the
firing rate of its input.  Arithmetic is exact: energies are kept as
:class:`fractions.Fraction` multiples of 0.1 pJ (4.6 pJ = 46 deci-pJ).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np


E_MAC_DPJ = 46  # 4.6 pJ
E_AC_DPJ = 9  # 0.9 pJ
E_MAC = 4.6
E_AC = 0.9


class EnergyInputError(ValueError):
    pass


def count_flops(layer) -> int:
    """conv: kh*kw*C_in*C_out*H_out*W_out; fc: D_in*D_out."""
    kind = getattr(layer, "kind", None)
    if kind == "conv":
        dims = (layer.kh, layer.kw, layer.c_in, layer.c_out, layer.h_out, layer.w_out)
    elif kind == "fc":
        dims = (layer.c_in, layer.c_out)
    else:
        raise EnergyInputError(f"unknown layer kind {kind!r}")
    if any(d is None for d in dims):
        raise EnergyInputError(f"{layer.name}: geometry not resolved")
    out = 1
    for d in dims:
        d = int(d)
        if d < 0:
            raise EnergyInputError(f"{layer.name}: negative dimension")
        out *= d
    return out


def dpj_to_pj(value: Fraction) -> float:
    """Deci-pJ (exact) to pJ (float, correctly rounded)."""
    return float(Fraction(value) / 10)


@dataclass
class EnergyRow:
    name: str
    kind: str  # conv | fc
    flops: int
    firing_rate: float | None  # None for the MAC stem
    op_kind: str  # MAC | AC
    energy_dpj: Fraction

    @property
    def energy_pj(self) -> float:
        return dpj_to_pj(self.energy_dpj)


@dataclass
class EnergyReport:
    rows: list
    T: int
    mac_per_step: bool = False
    e_mac_pj: float = E_MAC
    e_ac_pj: float = E_AC
    appendix: list = field(default_factory=list)  # informational, not in the totals

    @property
    def total_dpj(self) -> Fraction:
        return sum((r.energy_dpj for r in self.rows), Fraction(0))

    @property
    def mac_dpj(self) -> Fraction:
        return sum((r.energy_dpj for r in self.rows if r.op_kind == "MAC"), Fraction(0))

    @property
    def ac_dpj(self) -> Fraction:
        return sum((r.energy_dpj for r in self.rows if r.op_kind == "AC"), Fraction(0))

    @property
    def total_pj(self) -> float:
        return dpj_to_pj(self.total_dpj)

    def shares(self) -> tuple[float, float]:
        tot = self.total_dpj
        if tot == 0:
            return 0.0, 0.0
        return float(self.mac_dpj / tot), float(self.ac_dpj / tot)

    def totals(self) -> dict:
        mac_share, ac_share = self.shares()
        return {
            "E_total_pJ": self.total_pj,
            "E_MAC_total_pJ": dpj_to_pj(self.mac_dpj),
            "E_AC_total_pJ": dpj_to_pj(self.ac_dpj),
            "MAC_share": mac_share,
            "AC_share": ac_share,
            "E_MAC_pJ": self.e_mac_pj,
            "E_AC_pJ": self.e_ac_pj,
            "T": self.T,
            "mac_per_step": self.mac_per_step,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "kind", "flops", "firing_rate", "op", "energy_pJ"])
        for r in self.rows:
            fr = "" if r.firing_rate is None else repr(float(r.firing_rate))
            w.writerow([r.name, r.kind, r.flops, fr, r.op_kind, repr(r.energy_pj)])
        for name, macs in self.appendix:
            w.writerow([name, "info", macs, "", "MAC-excluded", ""])
        buf.write("\n")
        for k, v in self.totals().items():
            buf.write(f"# {k}={v}\n")
        return buf.getvalue()


def _rate_fraction(name, fr) -> Fraction:
    if fr is None:
        raise EnergyInputError(f"{name}: missing firing rate")
    try:
        f = Fraction(fr)
    except (TypeError, ValueError) as exc:
        raise EnergyInputError(f"{name}: firing rate {fr!r} is not a number") from exc
    if not 0 <= f <= 1:
        raise EnergyInputError(f"{name}: firing rate {fr!r} outside [0, 1]")
    return f


def estimate_energy(layers, firing_rates, T: int, mac_per_step: bool = False,
                    stem: str | None = "auto", appendix=()) -> EnergyReport:
    """Energy report for ``layers`` (objects with name/kind/geometry).

    ``firing_rates`` maps layer name to the firing rate of that layer's input
    (a sequence in layer order is also accepted).  The stem, the first layer
    when ``stem="auto"`` and it has no spike input tap, is billed as MAC;
    ``mac_per_step`` multiplies its cost by T.
    """
    if T < 1:
        raise EnergyInputError("T must be positive")
    layers = list(layers)
    if stem == "auto":
        stem = layers[0].name if layers and getattr(layers[0], "input_tap", "x") is None else None
    if not isinstance(firing_rates, dict):
        spike_layers = [l.name for l in layers if l.name != stem]
        firing_rates = list(firing_rates)
        if len(firing_rates) != len(spike_layers):
            raise EnergyInputError(f"{len(firing_rates)} firing rates for {len(spike_layers)} AC layers")
        firing_rates = dict(zip(spike_layers, firing_rates))
    rows = []
    for layer in layers:
        flops = count_flops(layer)
        if layer.name == stem:
            e = Fraction(E_MAC_DPJ * flops * (T if mac_per_step else 1))
            rows.append(EnergyRow(layer.name, layer.kind, flops, None, "MAC", e))
        else:
            fr = _rate_fraction(layer.name, firing_rates.get(layer.name))
            e = E_AC_DPJ * T * flops * fr
            rows.append(EnergyRow(layer.name, layer.kind, flops, float(fr), "AC", e))
    return EnergyReport(rows, T, mac_per_step, appendix=list(appendix))


def gau_macs(encoder, image_hw) -> int:
    """Rough multiply count of the attention unit (excluded from the totals)."""
    gau = getattr(encoder, "gau", None)
    if gau is None:
        return 0
    steps, hidden = gau.w_m.shape
    ho, wo = encoder.conv.output_hw(*image_hw)
    k = gau.sca.kernel
    mlp = 2 * (steps * hidden + hidden * steps)  # avg and max paths
    sca = k.shape[0] * k.shape[1] * k.shape[2] * k.shape[3] * ho * wo
    gate = 2 * steps * k.shape[0] * ho * wo  # M*N product and gating
    return mlp + sca + gate


def _tap_counts(net, images, seed, index_offset, batch_size):
    """(spike count, element count) per input tap, streamed over batches."""
    names = sorted({i.input_tap for i in net.layer_info() if i.input_tap is not None})
    counts = {t: [0, 0] for t in names}
    for start in range(0, len(images), batch_size):
        net.forward(images[start : start + batch_size], seed=seed,
                    index_offset=index_offset + start, record_taps=True)
        for t in names:
            x = net.taps[t]
            if not np.all((x == 0) | (x == 1)):
                raise ValueError(f"{t} is not a binary spike tensor")
            counts[t][0] += int(np.count_nonzero(x))
            counts[t][1] += x.size
    net.release()
    if not names or counts[names[0]][1] == 0:
        raise ValueError("no spike tensors measured")
    return counts


def measure_firing_rates(net, images, seed: int = 0, index_offset: int = 0,
                         batch_size: int = 256) -> dict[str, float]:
    """Firing rate of the spike tensor feeding each conv/fc layer, over all images.

    Images are forwarded ``batch_size`` at a time. In eval mode the result does
    not depend on the batch size, since counts are summed exactly.
    """
    counts = _tap_counts(net, images, seed, index_offset, batch_size)
    return {i.name: counts[i.input_tap][0] / counts[i.input_tap][1]
            for i in net.layer_info() if i.input_tap is not None}


def network_energy(net, images, seed: int = 0, mac_per_step: bool = False) -> EnergyReport:
    """Measure rates on ``images`` and build the report for ``net``."""
    rates = measure_firing_rates(net, images, seed)
    info = net.layer_info()
    stem = info[0].name if info and info[0].input_tap is None else None
    appendix = []
    if getattr(net.encoder, "gau", None) is not None:
        appendix.append(("encoder.gau", gau_macs(net.encoder, net.spec.image_size)))
    return estimate_energy(info, rates, net.spec.T, mac_per_step, stem=stem, appendix=appendix)


def overall_firing_rate(net, images, seed: int = 0, index_offset: int = 0,
                        batch_size: int = 256) -> float:
    """Spikes per neuron per step, pooled over every spike tensor feeding a layer."""
    counts = _tap_counts(net, images, seed, index_offset, batch_size)
    return sum(c[0] for c in counts.values()) / sum(c[1] for c in counts.values())
