import numpy as np
import pytest

import sap


@pytest.fixture(scope="session")
def scene():
    cube, truth = sap.make_synthetic_scene()
    return sap.normalize(cube), truth


@pytest.fixture(scope="session")
def scene_latent(scene):
    cube, truth = scene
    latent, dictionary = sap.build_dictionary(cube, sap.DictConfig())
    return latent, dictionary, truth
