"""
Checking that raw features never leave a client
===============================================

Tiny, distinctive values (canaries) are written into the raw rows before
training. The auditor scans every serialized payload for their exact bit
patterns. An honest run must never contain one; a client that ships its
raw rows is caught on the first upload.
"""

import numpy as np

from hybridvfl.data import SyntheticSpec, generate_synthetic
from hybridvfl.federation import Federation, PrivacyAuditor, RawLeakingClient, plant_canaries
from hybridvfl.models import ModelConfig, variant_model


def audited_run(leaky):
    ds = generate_synthetic(SyntheticSpec(n=64, seed=1))
    image, tab = ds.image_view.copy(), ds.tabular_view.copy()
    rng = np.random.default_rng(0)
    canaries = np.concatenate([plant_canaries(image, rng), plant_canaries(tab, rng)])
    model = variant_model("HybridVFL", ModelConfig(seed=1, tabular_width=tab.shape[1]))
    fed = Federation.from_model(model, ds.ids, image, tab, ds.labels, lr=0.1)
    if leaky:
        fed.tabular_client = RawLeakingClient(model.tabular, ds.ids, tab, 0.1)
    auditor = PrivacyAuditor(canaries)
    fed.network.observers.append(auditor.observe)
    fed.train([ds.ids[i:i + 16].tolist() for i in range(0, 64, 16)])
    return canaries, auditor.report


canaries, report = audited_run(leaky=False)
print(f"{len(canaries)} canaries planted, e.g. {canaries[:3]}")
print("honest clients:")
print(report.to_text())

_, report = audited_run(leaky=True)
print("raw-leaking tabular client:")
print(report.to_text())
