from .coco import ConversionResult, convert_coco_style
from .epochs import epoch_partition, epochs_per_cycle
from .manifest import DatasetManifest
from .samples import SCHEMA_VERSION, TASKS, GroundingSample, Instance, Phrase
from .synth import SynthDataset, SynthSpec, category_color, load_pixels, save_pixels, synth_generate
from .unified import load_unified, write_unified

__all__ = [name for name in dir() if not name.startswith("_")]
