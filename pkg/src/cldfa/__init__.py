"""Cross-lingual distillation with feature adaptation for text classification.

Modules:

* ``corpus``: tokenization, vocabularies, split containers, file readers and
  the synthetic bilingual generator.
* ``nn_core``: numpy layer primitives, losses, optimizers, gradient checking.
* ``kcnn``: the convolutional sentence classifier, the domain discriminator
  and checkpoint I/O.
* ``distill``: source training, soft labels, distillation, temperature
  ensembles and fine-tuning.
* ``evaluation``: accuracy reports, significance test, feature projection.
* ``cli``: the ``cldfa`` command.
"""

__version__ = "0.1.0"
