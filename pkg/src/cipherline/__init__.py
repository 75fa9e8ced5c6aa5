"""Few-shot symbol detection and transcription for ciphered manuscript lines."""

from .geometry import BBox, Detection, iou, nms
from .detector import ModelConfig, SiameseDetector
from .training import TrainConfig, train, fine_tune
from .inference import CandidateTable, detect_alphabet, filter_confidence
from .decoder import Token, TokenKind, Transcription, decode_line, transcription_to_string
from .metrics import EvalLine, EvalReport, missing_rate, recall_at_iou, ser, sweep
from .checkpoint import Checkpoint

__version__ = "0.1.0"
