import logging
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np

from src.data.dataset import Dataset
from src.models.checkpoint import load_checkpoint
from src.steps.evaluation import AccuracyReport, evaluate_accuracy, predict_expressions
from src.utils.exceptions import DimensionError

logger = logging.getLogger(__name__)


class ExpressionPredictor:
    """Checkpoint-backed expression classifier f = R∘encoder.

    The encoder is E_t unless the checkpoint was trained as the baseline, in
    which case its metadata names E_s.
    """

    def __init__(self, checkpoint: Union[str, Path]):
        try:
            logger.info(f"Loading checkpoint {checkpoint}...")
            self.bundle, self.metadata = load_checkpoint(checkpoint)
        except Exception as e:
            logger.error(f"❌ Failed to load checkpoint: {e}")
            raise
        self.checkpoint = Path(checkpoint)
        self.encoder = self.metadata.get("classifier_encoder", "E_t")
        logger.info("✅ Checkpoint loaded")
        logger.info(f"   Run: {self.metadata.get('run_id', 'unknown')}")
        logger.info(f"   Mode: {self.metadata.get('mode', 'unknown')} (classifier R∘{self.encoder})")

    @property
    def arch(self):
        return self.bundle.arch

    def _validate_images(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images.reshape(len(images), -1)
        elif images.ndim == 2 and images.shape == (self.arch.image_side, self.arch.image_side):
            images = images.reshape(1, -1)
        if images.ndim != 2 or images.shape[1] != self.arch.n_pixels:
            raise DimensionError(f"expected images with {self.arch.n_pixels} pixels, got shape {images.shape}")
        return images

    def predict(self, images: np.ndarray) -> np.ndarray:
        return predict_expressions(self.bundle, self._validate_images(images), self.encoder)

    def predict_single(self, image: np.ndarray) -> int:
        return int(self.predict(image)[0])

    def evaluate(self, dataset: Dataset) -> AccuracyReport:
        return evaluate_accuracy(self.bundle, dataset, self.encoder)

    def get_model_info(self) -> Dict[str, Any]:
        return {
            "run_id": self.metadata.get("run_id", "unknown"),
            "mode": self.metadata.get("mode", "unknown"),
            "classifier_encoder": self.encoder,
            "image_side": self.arch.image_side,
            "n_poses": self.arch.n_poses,
            "n_expressions": self.arch.n_expressions,
            "d_p": self.arch.d_p,
            "d_e": self.arch.d_e,
        }
