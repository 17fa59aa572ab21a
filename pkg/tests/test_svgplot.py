import xml.etree.ElementTree as ET

import numpy as np
import pytest

from nslsysid.errors import EmptySelectionError, InvalidArgumentError
from nslsysid.nslfit import NSLParams
from nslsysid.outcomes import Outcome
from nslsysid.svgplot import NSL_COLOR, PlotSpec, render_svg

NS = "{http://www.w3.org/2000/svg}"


def outcomes(n=40, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        c = 10 ** rng.uniform(3, 8)
        out.append(Outcome(key=f"k{i}", status="ok", system="ball", arch="ph", seed=0, n_e=2, d_tilde=2, nh_tilde=2,
                           nd_tilde=2, d=float(rng.uniform(1, 30)), p=int(rng.integers(30, 900)), c=c,
                           nmae=float(5 * c**-0.2), nmse=1.0))
    return out


def test_scatter_is_wellformed_and_deterministic():
    recs = outcomes()
    a = render_svg(recs, PlotSpec(system="ball"))
    b = render_svg(list(reversed(recs)), PlotSpec(system="ball"))
    assert a == b
    root = ET.fromstring(a)
    circles = root.findall(f"./{NS}g[@class='points']/{NS}circle")
    assert len(circles) == 40
    assert root.find(f".//{NS}polyline[@class='nsl']") is None


def test_decade_ticks_span_data():
    root = ET.fromstring(render_svg(outcomes(), PlotSpec()))
    labels = [t for t in root.iter(f"{NS}text") if t.find(f"{NS}tspan") is not None]
    exps = sorted({int(t.find(f"{NS}tspan").text) for t in labels})
    assert exps[0] <= 3 and exps[-1] >= 8


def test_overlays_and_legends():
    p = NSLParams.from_natural(0.0, 5.0, -0.2)
    svg = render_svg(outcomes(), PlotSpec(), envelope=True, nsl=p, formula="L(c) = 5 c^{-0.2}")
    root = ET.fromstring(svg)
    assert root.find(f".//{NS}polyline[@class='envelope']") is not None
    assert root.find(f".//{NS}polyline[@class='nsl']").get("stroke") == NSL_COLOR
    legend = "".join(root.find(f".//{NS}g[@class='legend']").itertext())
    assert "data d [s]" in legend and "model size p" in legend


def test_plot_spec_validation_and_encodings():
    assert PlotSpec("compute").encodings() == ("data", "model")
    assert PlotSpec("data").encodings() == ("model", "compute")
    assert PlotSpec("model", color_by="compute").encodings() == ("compute", "compute")
    with pytest.raises(InvalidArgumentError):
        PlotSpec("time")
    with pytest.raises(EmptySelectionError):
        render_svg(outcomes(), PlotSpec(system="motor"))
