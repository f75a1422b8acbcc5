"""Training-free subject and style composition on a toy latent diffusion model."""
from .errors import (FreeTunerError, InvalidArgument, MissingSubjectTokenError, PreconditionError,
                     UnknownTokenError)
from .models import load_model
from .pipeline import (GenerationConfig, LayoutCondition, StructureCondition, StyleSpec, SubjectSpec,
                       attach_external_condition, generate, generate_multi_style, preprocess_subject)

__version__ = "0.1.0"
