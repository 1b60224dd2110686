"""The ``kbvqa`` package provides the complete supported API.

.. note:: It is not recommended to import any submodules as they are considered protected and
          might get breaking changes between minor and patch versions.

The API is divided into multiple domains:

  * `Numeric core`_
  * `Knowledge base`_
  * `Encoders and detector`_
  * `Memory network`_
  * `Harness`_
  * `Server and providers`_
  * `Exceptions`_

------------
Numeric core
------------

A :class:`Tensor <kbvqa.Tensor>` wraps a numpy array and records the operation that
produced it. :func:`backward <kbvqa.backward>` on a scalar fills the ``grad`` of every
tensor that requires one. Parameters live in a :class:`ParameterStore <kbvqa.ParameterStore>`
under dotted names, :func:`adam_step <kbvqa.adam_step>` updates the trainable ones and
checkpoints are written with :func:`save_checkpoint <kbvqa.save_checkpoint>`.

.. doctest::

    >>> import kbvqa
    >>> a = kbvqa.Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    >>> loss = kbvqa.reduce_sum(kbvqa.matmul(a, a))
    >>> kbvqa.backward(loss)
    >>> a.grad.tolist()
    [[7.0, 11.0], [9.0, 13.0]]

--------------
Knowledge base
--------------

Facts are :class:`FactTriplet <kbvqa.FactTriplet>` objects. A reversed fact answers with its
object, a forward fact with its subject (:func:`answer_of <kbvqa.answer_of>`).
:func:`build_index <kbvqa.build_index>` turns parsed facts into a
:class:`KnowledgeBase <kbvqa.KnowledgeBase>` and
:func:`retrieve_candidates <kbvqa.retrieve_candidates>` collects the facts around subject
and object clues, optionally filtered by relation.

---------------------
Encoders and detector
---------------------

The recurrent cells, attention layers and the gated fusion in :mod:`kbvqa.encoders` are
shared by the :class:`RelationPhraseDetector <kbvqa.RelationPhraseDetector>`, which predicts
the subject, relation and object of the supporting fact, and the memory network.
:func:`top_k_clues <kbvqa.top_k_clues>` turns a prediction into a :class:`ClueSet <kbvqa.ClueSet>`.

--------------
Memory network
--------------

:func:`fill_memory <kbvqa.fill_memory>` builds a :class:`MemoryBank <kbvqa.MemoryBank>` of
fixed size from retrieved candidates. The :class:`MemoryNetwork <kbvqa.MemoryNetwork>`
encodes the facts into keys and values, reads the memory with the image-question embedding,
re-attends question and image, reads again and scores every slot.

-------
Harness
-------

Runs are configured with a :class:`RunConfig <kbvqa.RunConfig>`.
:func:`generate_synthetic <kbvqa.generate_synthetic>` creates a data directory,
:func:`train <kbvqa.train>` runs both training stages and
:func:`evaluate <kbvqa.evaluate>`, :func:`ablate <kbvqa.ablate>` and
:func:`sweep_topk <kbvqa.sweep_topk>` measure the result. The same steps are available
through the ``kbvqa`` command.

--------------------
Server and providers
--------------------

The :class:`Server <kbvqa.Server>` provides functions
via `EPC <http://python-epc.readthedocs.io/en/latest/>`_ that a client like Emacs can call.
The functions come from a :class:`provider <kbvqa.ProviderBase>`.
:class:`KBQAProvider <kbvqa.KBQAProvider>` answers questions with the checkpoints of a run and
:class:`ChainedProvider <kbvqa.ChainedProvider>` combines providers; by calling
:meth:`add_provider <kbvqa.ChainedProvider.add_provider>` (also remotely) with a dotted
path you can add your own providers at runtime.

Methods decorated with :func:`validate_config <kbvqa.validate_config>` are only listed by
:meth:`list_methods <kbvqa.ProviderBase.list_methods>` for configurations their
`validators <kbvqa.ValidatorInterface>` accept.

----------
Exceptions
----------

Here is a list of custom exceptions raised in kbvqa:

  * :class:`ValidationException <kbvqa.ValidationException>`
  * :class:`ConfigError <kbvqa.ConfigError>`
  * :class:`DimensionError <kbvqa.DimensionError>`
  * :class:`GradientError <kbvqa.GradientError>`
  * :class:`FactParseError <kbvqa.FactParseError>`
  * :class:`DivergenceError <kbvqa.DivergenceError>`

---
API
---

"""
from .config import *
from .dataset import *
from .detector import *
from .encoders import *
from .evaluation import *
from .kbstore import *
from .memnet import *
from .numcore import *
from .params import *
from .provider import *
from .server import *
from .training import *
from .validators import *
from .vocab import *

__all__ = (numcore.__all__ +
           params.__all__ +
           kbstore.__all__ +
           vocab.__all__ +
           encoders.__all__ +
           detector.__all__ +
           memnet.__all__ +
           validators.__all__ +
           config.__all__ +
           dataset.__all__ +
           training.__all__ +
           evaluation.__all__ +
           server.__all__ +
           provider.__all__)

__version__ = "0.1.0"
