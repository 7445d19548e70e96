# Schemas package for rdlab documents (configs, reports, run records)
from rdlab.schemas.info import *
from rdlab.schemas.coding import *
from rdlab.schemas.training import *
from rdlab.schemas.evaluation import *
