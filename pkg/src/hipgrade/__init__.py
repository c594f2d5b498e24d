"""Hip osteoarthritis grading from CT via DRR projections.

Pipeline: synthesize or load CT volumes, crop a femoral-head-centered
ROI and project it to a normalized 150x150 DRR, grade it with a deep
model under combined/separated x classification/regression settings,
quantify uncertainty with Monte-Carlo dropout, and evaluate with
ordinal-aware metrics and significance tests.
"""

from .labels import (GradeLabel, ManifestRow, NUM_CLASSES, VALID_PAIRS,
                     combined_to_separated, load_manifest, separated_to_combined,
                     write_manifest)
from .volume import (CLASS_GEOMETRY, CTVolume, DetectionError, LandmarkPair,
                     PhantomSpec, VolumeFormatError, detect_fhc_phantom,
                     generate_phantom, load_landmarks, load_volume,
                     save_landmarks, save_volume, spec_for_class)
from .drr import (AugmentationParams, DRRImage, DRR_SIZE, ROI_MM, augment,
                  extract_roi, load_drr, mean_projection, normalize, project_ap,
                  render_drr, save_drr)
from .grading import (BACKBONE_NAMES, BackboneSpec, GradingModel, HeadSpec,
                      ModelOutput, build_model, compute_loss, default_head_spec,
                      focal_loss, load_checkpoint, predict_class, predict_classes,
                      predict_from_arrays, regression_loss, save_checkpoint,
                      two_head_loss)
from .uncertainty import (DEFAULT_MC_SAMPLES, MCSampleSet, PredictionRecord,
                          load_prediction_records, make_prediction_record,
                          mc_predict, mc_sample, mc_sample_batch, predictive_mean,
                          scalar_uncertainty, variance, write_prediction_records)
from .metrics import (BalancedAccuracy, ConfusionMatrix, EvalSet,
                      balanced_accuracy, confusion, eca, invalid_fraction, onca,
                      per_grade_accuracy, regression_se, summarize)
from .stats import (ComparisonGrid, MannWhitneyResult, TTestResult, bonferroni,
                    mann_whitney_u, paired_t_test, render_grid,
                    significance_grid, student_t_two_sided)
from .experiments import (ExperimentConfig, FoldResult, ImageCache, RunReport,
                          TrainResult, ablate, embed_features, evaluate_external,
                          evaluate_model, extract_features, fold_partitions,
                          load_config, published_config, run_cv, save_config,
                          select_rows, split_patientwise, train)

__version__ = "0.1.0"
