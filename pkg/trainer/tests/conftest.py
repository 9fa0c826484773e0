import pytest

import sap


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory):
    """Desk-scale labeled dataset: 13 textured sources -> 208 pairs."""
    out = tmp_path_factory.mktemp("pairs_ds")
    sources = [sap.make_textured_source(seed) for seed in range(13)]
    cfg = sap.GenConfig(area_fraction_range=(0.02, 0.05), band_count_range=(24, 48), seed=11)
    sap.emit_dataset(sources, cfg, out)
    return out
