"""Tools to handle the run ledger database."""
from .models import Base
