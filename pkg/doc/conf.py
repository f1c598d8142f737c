# Sphinx configuration for the casrnn manual.

import os
import sys

import sphinx_rtd_theme

sys.path.insert(0, os.path.abspath(".."))


project = "casrnn"
copyright = "2026, casrnn developers"
author = "casrnn developers"
release = "0.1"

extensions = [
    "sphinx.ext.autodoc",
    "sphinxarg.ext",
]

master_doc = "index"
exclude_patterns = ["_build"]

html_theme = "sphinx_rtd_theme"
html_theme_path = [sphinx_rtd_theme.get_html_theme_path()]

man_pages = [
    ("index", "casrnn", "casrnn Documentation", [author], 1),
]
