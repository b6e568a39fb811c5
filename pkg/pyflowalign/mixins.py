import logging
from typing import Any, Iterable, Callable

from pyflowalign.errors import ConfigError

logger = logging.getLogger(__name__)


class DictTransformationMixin:
    """
    Validates and transforms a raw dict, as it is loaded from a config file, into a dict of domain objects.

    The class using this mixin has to define the class attribute ``dict_transformation``. It maps tuples
    ``(original_key, transformed_key)`` to dicts which map types to the names of the methods that transform
    a value of that type. The types are checked in order, the first match wins:

    .. code:: python

        dict_transformation = {
            ('seed', 'seed'):       {int: 'process_seed'},
            ('reward', 'reward'):   {dict: 'process_reward'},
        }

    Every transformation method receives the original key and the value and returns the transformed value.
    A value whose type has no entry and a missing key both raise a ``ConfigError`` naming the key.
    """

    dict_transformation = {}

    # PUBLIC METHODS
    # --------------

    def process(self, content: dict) -> dict:
        result = {}
        for (key_original, key_transformed), transformations in self.dict_transformation.items():
            result.update(self._process_one_to_one(content, key_original, key_transformed, transformations))

        return result

    # PROTECTED METHODS
    # -----------------

    def _process_one_to_one(self,
                            content: dict,
                            original_key: Any,
                            transformed_key: Any,
                            transformations: dict) -> dict:
        self._check_keys(content, [original_key])

        result = {}
        value = content[original_key]
        for t, method_name in transformations.items():
            if isinstance(value, t):
                method = self._get_object_method(self, method_name)
                result[transformed_key] = method(original_key, value)
                break
        else:
            self._type_error(original_key, value, transformations.keys())

        return result

    @classmethod
    def _type_error(cls, key, value, valid_types):
        message = 'The key "{}" cannot have the value {}! Supported types are {}'.format(
            str(key),
            repr(value),
            ', '.join(t.__name__ for t in valid_types)
        )
        raise ConfigError(message, key=str(key))

    @staticmethod
    def _get_object_method(obj: object, method_name: str) -> Callable:
        assert hasattr(obj, method_name), f'The method "{method_name}" has to actually be implemented in {type(obj)}'
        return getattr(obj, method_name)

    @staticmethod
    def _check_keys(content: dict, keys: Iterable):
        for key in keys:
            if key not in content.keys():
                raise ConfigError(f'missing required key "{key}"', key=str(key))
