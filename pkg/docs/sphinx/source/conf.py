#!/usr/bin/env python3
#
# Sphinx configuration of the gridless-aoa API docs
#
import sys
from pathlib import Path

# Add gridless-aoa module to syspath
sys.path.insert(0, str(Path('../../').resolve()))

# -- General configuration ------------------------------------------------

extensions = [
    "sphinx.ext.autodoc",
    "sphinx.ext.napoleon",
    "sphinx.ext.mathjax",
    "sphinx.ext.viewcode",
]

# Docstrings are numpy style
napoleon_google_docstring = False
napoleon_use_param = False
napoleon_use_ivar = True

# Keep the source order of dataclass fields and methods
autodoc_member_order = 'bysource'


source_suffix = ['.rst']
master_doc = 'index'

project = 'gridless-aoa API'
copyright = '2024, Mahendra Paipuri'
author = 'Mahendra Paipuri'

language = 'en'
exclude_patterns = []
pygments_style = 'sphinx'

# -- Options for HTML output ----------------------------------------------

html_theme = 'alabaster'
html_show_sphinx = False
html_show_copyright = False
