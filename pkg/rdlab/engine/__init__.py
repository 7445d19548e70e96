# Reverse-mode differentiation engine and parameter store
from rdlab.engine.tensor import Tensor, Function, constant, stop_gradient
from rdlab.engine import ops
from rdlab.engine.params import ParamStore, adam_step, save_checkpoint, load_checkpoint
