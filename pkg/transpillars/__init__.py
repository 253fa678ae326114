from . import errors
from . import tensor
from . import gradcheck
from . import nn
from . import optim
from . import box
from . import pillars
from . import attention
from . import fam
from . import model
from . import synth
from . import evaluate
from . import config
from . import checkpoint
from . import train
from . import dump
from .model import TransPillars
