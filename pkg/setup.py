#!/usr/bin/env python3

from setuptools import setup

import os
pkg_dir = os.path.abspath(os.path.dirname(__file__))
readme_fn = os.path.join(pkg_dir, 'README.md')
with open(readme_fn, encoding='utf-8') as file:
    long_description = file.read()

setup(
    name='expertsdm',
    version='0.1',
    description="Spatial species distribution models combining survey data and expert maps",
    long_description=long_description,
    long_description_content_type='text/markdown',
    license='GPLv3',
    packages=['expertsdm'],
    python_requires='>=3.8',
    install_requires=[ "numpy", "scipy", "shapely>=2.0", "triangle", "progressbar2", "humanfriendly" ],
    extras_require={ "cholmod": [ "scikit-sparse" ],
                     "test": [ "pytest" ] },
    entry_points={'console_scripts': ['expertsdm=expertsdm.runner:run']}
);
