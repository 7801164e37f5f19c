# Configuration file for the Sphinx documentation builder.
# https://www.sphinx-doc.org/en/master/usage/configuration.html
import os
import sys
sys.path.insert(0, os.path.abspath('..'))

project = 'splatsdf'
copyright = '2026, splatsdf developers'
author = 'splatsdf developers'

extensions = [
    'sphinx.ext.autodoc',
    'sphinx.ext.mathjax',
    'sphinx.ext.viewcode',
    'numpydoc',
    'myst_parser',
    'sphinxarg.ext',
]

# API pages only; the CLI pages import the real packages
autodoc_mock_imports = ['torch', 'skimage', 'trimesh', 'plyfile', 'PIL', 'scipy', 'tqdm']

templates_path = []
exclude_patterns = ['_build', 'Thumbs.db', '.DS_Store']

html_theme = 'sphinx_rtd_theme'
html_theme_options = {
    'navigation_depth': 4,
}

numpydoc_show_class_members = False
