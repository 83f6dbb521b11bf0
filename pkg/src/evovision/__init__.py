"""Co-evolution of eye optics, morphology and learned behavior."""

from .genotype import (BodyGeometry, Genome, MorphologicalGenes, NeuralGenes,
                       OpticalGenes, decode, encode, eye_placements, genome_from_text,
                       genome_to_text, validate)
from .optics import (OpticsGeometry, PsfKernel, SceneImage, SensorImage,
                     build_phase_surface, compute_psf, form_image, psf_for_genome)
from .world import (FITNESS_WEIGHTS, TRAINING_WEIGHTS, Observation, World, WorldEngine,
                    WorldSpec, detection_spec, evaluate_fitness, navigation_spec, reward,
                    tracking_spec)
from .policy import PolicyNetwork, build_network, parameter_count
from .ppo import TrainerConfig, TrainResult, train
from .metrics import (MtfCurve, PowerLawFit, bootstrap_ci, cpd, fit_power_law,
                      image_quality, mtf, psnr, ssim)

__version__ = "0.1.0"
