import os, sys
# Makes relative imports to work without the need
# of '.' before the name of the package or py file.
# Modules import their siblings by bare name, i.e.
# `from utils import err`, whether they are loaded
# from the lightprune script, pytest or a notebook.
version = '1.0.0'
sys.path.append(os.path.dirname(os.path.realpath(__file__)))
