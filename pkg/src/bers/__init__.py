"""Video action recognition with an optical-flow teacher distilled into an RGB student.

Modules:

* :mod:`bers.tensor` - tape autodiff, 3-D convolution, batch norm, losses, SGD
* :mod:`bers.flow` - TV-L1 optical flow and the ``.bflo`` flow file
* :mod:`bers.net` - teacher and student 3-D ResNeXt networks
* :mod:`bers.checkpoint` - ``.bck`` checkpoint files
* :mod:`bers.train` - teacher training, distillation, lambda grid search, evaluation
* :mod:`bers.synthvid` - synthetic motion/static clips and the ``.bvds`` dataset file
* :mod:`bers.bench` - latency harness for RGB-only versus flow inference
* :mod:`bers.cli` - the ``bers`` command
"""

__version__ = "0.1.0"
