# Sphinx configuration for the e3-dtr documentation.

import os.path
import sys

sys.path.insert(0, os.path.abspath("../src"))

project = "e3-dtr"
project_copyright = "2024, AdaCore"
author = "AdaCore"

extensions = ["autoapi.extension"]
autoapi_type = "python"
autoapi_dirs = ["../src/e3"]

master_doc = "index"
source_suffix = ".rst"
exclude_patterns = ["_build"]

html_theme = "sphinx_rtd_theme"
