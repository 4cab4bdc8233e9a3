from setuptools import setup, find_packages


NAME = 'headfuse'
DESCRIPTION = ('Fusion, refinement and evaluation of PCA 3D morphable '
               'models of the human head. In Python and TensorFlow.')
VERSION = '0.1.0'
with open('README.md') as f:
    LONG_DESCRIPTION = f.read()
with open('requirements.txt') as f:
    REQUIREMENTS = [line.strip() for line in f if line.strip()]


setup(
    name=NAME,
    version=VERSION,
    description=DESCRIPTION,
    long_description=LONG_DESCRIPTION,
    packages=find_packages(exclude=[
        'tests.*', 'tests']),
    install_requires=REQUIREMENTS,
    extras_require={'test': ['pytest']},
    entry_points={
        'console_scripts': ['headfuse=headfuse.cli:main'],
    },
    classifiers=[
        'Development Status :: 3 - Alpha',
        'Intended Audience :: Science/Research',
        'License :: OSI Approved :: MIT License',
        'Programming Language :: Python :: 3+',
    ],
    zip_safe=False,
)
