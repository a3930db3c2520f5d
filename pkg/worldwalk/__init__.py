from . import autodiff, config, envsim, errors, helpers, pathcmd, vaepolicy, worldmodel
from .buffer import ReplayBuffer
from .trainer import Session
