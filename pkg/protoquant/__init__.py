from .version import __version__
from .helpers import *
from .diffcore import *
from .protogen import *
from .quantizer import *
from .fusion import *
from .losses import *
from .datasim import *
from .trainer import *
from .evalkit import *
from .cli import *
