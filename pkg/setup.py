from setuptools import setup


# Description
with open('README.md') as file:
    long_description = file.read()


setup(
    name='transpillars',
    version='0.1.0',
    description='Multi-frame pillar detection with cross-frame deformable attention',
    install_requires=['numpy', 'PyYAML', 'tqdm'],
    extras_require={'test': ['pytest']},
    packages=['transpillars'],
    entry_points={
        'console_scripts': ['transpillars=transpillars.__main__:main']},
    long_description=long_description,
    long_description_content_type='text/markdown',
    keywords=['lidar', 'detection', 'attention', 'point-cloud', 'temporal'],
    classifiers=['License :: OSI Approved :: MIT License'],
    license='MIT')
