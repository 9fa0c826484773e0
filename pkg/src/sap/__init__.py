"""Hyperspectral anomaly detection with a learned anomaly prior.

Pipeline: pseudo-anomaly dataset synthesis for the pretext classifier, a
dual-purified background dictionary in a reduced spectral space, an
alternating-direction solver whose anomaly sub-step is a plug-in scorer,
and threshold-swept ROC/AUC evaluation.
"""

from .core import HsiCube, UnfoldedMatrix, fold, kmeans, load_hsi, normalize, sad, save_hsi, unfold
from .dictionary import (
    BackgroundDictionary,
    DictConfig,
    LatentHsi,
    build_dictionary,
    cluster_probabilities,
    dual_purify,
    extract_latent,
    load_dictionary,
    save_dictionary,
    sdc_loss,
)
from .metrics import AucReport, RocTriple, auc_indicators, evaluate, render_map, roc_curves
from .prior import (
    CnnExtractor,
    DetectionMap,
    GuidedMap,
    PriorConfig,
    RandomConvExtractor,
    adaptive_threshold,
    apply_guided_map,
    extract_features,
    mahalanobis_scores,
    propagate_scores,
    run_target_task,
    split_cubes,
)
from .pseudo import (
    GenConfig,
    LabeledPair,
    PolygonPrism,
    emit_dataset,
    generate_pseudo_anomaly,
    rasterize_polygon,
    sample_prism_spec,
)
from .solver import (
    AdmmState,
    AnomalyPriorHandle,
    BaselineConfig,
    NoiseEstimate,
    SolveResult,
    SolverConfig,
    SolverDivergence,
    a_step,
    e_step,
    estimate_noise,
    j_step,
    l_step,
    prox_l21,
    solve,
    solve_l21,
)
from .synthetic import make_synthetic_scene, make_textured_source
from .weights import BlockSpec, CnnWeights, default_blocks, load_weights, save_weights

__version__ = "0.1.0"
