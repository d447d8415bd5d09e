#!/usr/bin/env python

from distutils.core import setup

setup(name='aesf',
	version='1.0',
	description='Desk-scale automated essay scoring with bag-of-words, LSTM and transformer scorers',
	packages=['aesf'],
	install_requires=[
		"numpy",
		"scipy",
		"pandas",
		"scikit-learn",
		"pytest",
		"pytest-cov",
		"hypothesis",
		"tqdm",
		"black",
	],
)
