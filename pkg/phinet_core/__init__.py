from phinet_core.abstract import *
from phinet_core import config
from phinet_core import backbone
from phinet_core import hippocampus
from phinet_core import objective
from phinet_core import slow_learner
from phinet_core import videodata
from phinet_core import checkpoint
from phinet_core import trainer
from phinet_core import propagate
from phinet_core import gradcheck
from phinet_core import log_utils

from phinet_core.version import __version__
