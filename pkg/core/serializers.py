import json
from pathlib import Path

from rest_framework import serializers

from core.services.errors import ConfigError, NormalFormError
from core.services.expressions import ChartBox, ExpressionField
from core.services.fields import BivectorField

COMMANDS = ['check-jacobi', 'realize', 'dual-pair', 'normal-form', 'moser', 'split']


class StrictSerializer(serializers.Serializer):
    """Serializer that rejects keys it does not declare"""

    def to_internal_value(self, data):
        if isinstance(data, dict):
            unknown = sorted(set(data) - set(self.fields))
            if unknown:
                raise serializers.ValidationError({key: ['Unknown field.'] for key in unknown})
        return super().to_internal_value(data)


def interval_list(**kwargs):
    return serializers.ListField(
        child=serializers.ListField(child=serializers.FloatField(), min_length=2, max_length=2),
        **kwargs
    )


def vector(**kwargs):
    return serializers.ListField(child=serializers.FloatField(), **kwargs)


def matrix(**kwargs):
    return serializers.ListField(child=serializers.ListField(child=serializers.FloatField()), **kwargs)


class ManifoldSerializer(StrictSerializer):
    """Chart box and Poisson bivector as expression strings in upper or lower slots"""
    dimension = serializers.IntegerField(min_value=1, max_value=12)
    box = interval_list(min_length=1)
    bivector = serializers.DictField(child=serializers.CharField(), allow_empty=True)

    def validate_box(self, value):
        for lo, hi in value:
            if lo > hi:
                raise serializers.ValidationError(f'Interval [{lo}, {hi}] is empty.')
        return value

    def validate(self, attrs):
        """Build the bivector once so slot and grammar errors surface here"""
        if len(attrs['box']) != attrs['dimension']:
            raise serializers.ValidationError({
                'box': f"Expected {attrs['dimension']} intervals, got {len(attrs['box'])}."
            })
        try:
            BivectorField(ChartBox('config', attrs['box']), attrs['bivector'])
        except NormalFormError as e:
            raise serializers.ValidationError({'bivector': str(e)})
        return attrs


class TransversalSerializer(StrictSerializer):
    """Point, affine or expression embedding of a transversal"""
    name = serializers.CharField(required=False, default='X')
    kind = serializers.ChoiceField(choices=['point', 'affine', 'expression'])
    origin = vector(required=False)
    directions = matrix(required=False)
    components = serializers.ListField(child=serializers.CharField(), required=False)
    box = interval_list(required=False)

    def validate(self, attrs):
        kind = attrs['kind']
        if kind in ('point', 'affine') and 'origin' not in attrs:
            raise serializers.ValidationError({'origin': f'Required for a {kind} transversal.'})
        if kind == 'affine':
            directions = attrs.get('directions')
            if not directions:
                raise serializers.ValidationError({'directions': 'An affine transversal needs directions.'})
            if len(attrs.get('box', [])) != len(directions):
                raise serializers.ValidationError({'box': 'Give one parameter interval per direction.'})
        if kind == 'expression':
            if not attrs.get('components'):
                raise serializers.ValidationError({'components': 'An expression transversal needs components.'})
            if not attrs.get('box'):
                raise serializers.ValidationError({'box': 'An expression transversal needs a parameter box.'})
            try:
                parameters = ChartBox('parameters', attrs['box'])
                for component in attrs['components']:
                    ExpressionField(component, parameters)
            except NormalFormError as e:
                raise serializers.ValidationError({'components': str(e)})
        return attrs


class GroupSerializer(StrictSerializer):
    """Linear symmetries fixing a point: a finite matrix list or a sampled circle"""
    kind = serializers.ChoiceField(choices=['trivial', 'finite', 'circle'])
    matrices = serializers.ListField(child=matrix(), required=False)
    generator = matrix(required=False)
    nodes = serializers.IntegerField(min_value=1, required=False, default=64)
    fixed_point = vector(required=False)

    def validate(self, attrs):
        if attrs['kind'] == 'finite' and not attrs.get('matrices'):
            raise serializers.ValidationError({'matrices': 'A finite group needs its element matrices.'})
        if attrs['kind'] == 'circle' and not attrs.get('generator'):
            raise serializers.ValidationError({'generator': 'A circle action needs a generator.'})
        return attrs


class FlowSerializer(StrictSerializer):
    """Integrator and quadrature parameters; omitted values fall back to settings"""
    steps = serializers.IntegerField(min_value=1, required=False)
    quadrature = serializers.IntegerField(min_value=1, max_value=64, required=False)
    fiber_radius = serializers.FloatField(min_value=0.0, required=False)
    moser_steps = serializers.IntegerField(min_value=1, required=False)
    primitive_nodes = serializers.IntegerField(min_value=1, max_value=64, required=False)
    fd_step = serializers.FloatField(min_value=1e-12, required=False)


class SamplesSerializer(StrictSerializer):
    """Sample plan for the seeded Philox sampler"""
    count = serializers.IntegerField(min_value=0, default=0)
    seed = serializers.IntegerField(min_value=0, required=False, allow_null=True)
    base_radius = serializers.FloatField(min_value=0.0, required=False)

    def validate(self, attrs):
        """Randomized sampling must be reproducible"""
        if attrs.get('count', 0) > 0 and attrs.get('seed') is None:
            raise serializers.ValidationError({'seed': 'A seed is required when count > 0.'})
        return attrs


class TolerancesSerializer(StrictSerializer):
    """Overrides of the default pass thresholds"""
    jacobi = serializers.FloatField(min_value=0.0, required=False)
    realization = serializers.FloatField(min_value=0.0, required=False)
    closedness = serializers.FloatField(min_value=0.0, required=False)
    dual_pair = serializers.FloatField(min_value=0.0, required=False)
    orthogonality = serializers.FloatField(min_value=0.0, required=False)
    normal_form = serializers.FloatField(min_value=0.0, required=False)
    identity = serializers.FloatField(min_value=0.0, required=False)
    moser = serializers.FloatField(min_value=0.0, required=False)
    extension = serializers.FloatField(min_value=0.0, required=False)
    split = serializers.FloatField(min_value=0.0, required=False)
    group = serializers.FloatField(min_value=0.0, required=False)


class MoserSerializer(StrictSerializer):
    """Gauge path π^{t dα} and/or the extension-independence run"""
    alpha = serializers.ListField(child=serializers.CharField(), required=False)
    points = matrix(required=False)
    extension = serializers.BooleanField(required=False, default=False)


class SplitSerializer(StrictSerializer):
    """Splitting point, chart sizes and the number of b-map trials"""
    point = vector()
    fiber_radius = serializers.FloatField(min_value=0.0, required=False, default=0.1)
    half_width = serializers.FloatField(min_value=0.0, required=False, default=0.1)
    b_trials = serializers.IntegerField(min_value=0, required=False, default=20)


class OutputSerializer(StrictSerializer):
    report = serializers.CharField(required=False)
    csv = serializers.CharField(required=False)


class RunConfigSerializer(StrictSerializer):
    """Serializer for a complete run configuration"""
    name = serializers.CharField()
    description = serializers.CharField(required=False, allow_blank=True)
    manifold = ManifoldSerializer()
    transversal = TransversalSerializer(required=False)
    group = GroupSerializer(required=False)
    flow = FlowSerializer(required=False)
    samples = SamplesSerializer(required=False)
    tolerances = TolerancesSerializer(required=False)
    moser = MoserSerializer(required=False)
    split = SplitSerializer(required=False)
    output = OutputSerializer(required=False)

    def validate(self, attrs):
        """Check every coordinate list against the manifold dimension"""
        n = attrs['manifold']['dimension']
        errors = {}

        transversal = attrs.get('transversal')
        if transversal:
            if 'origin' in transversal and len(transversal['origin']) != n:
                errors['transversal'] = f'Origin must have {n} coordinates.'
            elif any(len(d) != n for d in transversal.get('directions', [])):
                errors['transversal'] = f'Directions must have {n} coordinates.'
            elif transversal['kind'] == 'expression' and len(transversal['components']) != n:
                errors['transversal'] = f'An embedding into dimension {n} needs {n} components.'

        group = attrs.get('group')
        if group:
            shapes = [m for m in group.get('matrices', [])]
            if 'generator' in group:
                shapes.append(group['generator'])
            if any(len(m) != n or any(len(row) != n for row in m) for m in shapes):
                errors['group'] = f'Group matrices must be {n}×{n}.'
            elif 'fixed_point' in group and len(group['fixed_point']) != n:
                errors['group'] = f'Fixed point must have {n} coordinates.'

        moser = attrs.get('moser')
        if moser:
            if 'alpha' in moser and len(moser['alpha']) != n:
                errors['moser'] = f'The 1-form needs {n} components.'
            elif any(len(p) != n for p in moser.get('points', [])):
                errors['moser'] = f'Points must have {n} coordinates.'
            elif moser.get('extension') and not transversal:
                errors['moser'] = 'The extension run needs a transversal.'
            else:
                try:
                    box = ChartBox('config', attrs['manifold']['box'])
                    for component in moser.get('alpha', []):
                        ExpressionField(component, box)
                except NormalFormError as e:
                    errors['moser'] = str(e)

        split = attrs.get('split')
        if split and len(split['point']) != n:
            errors['split'] = f'Splitting point must have {n} coordinates.'

        errors.update(self._command_requirements(attrs))

        if errors:
            raise serializers.ValidationError(errors)
        return attrs

    def _command_requirements(self, attrs):
        """Sections the command given in the serializer context cannot run without"""
        command = self.context.get('command')
        needs = {
            'normal-form': ['transversal'],
            'split': ['split'],
            'moser': ['moser'],
        }.get(command, [])
        errors = {section: 'Required for this command.' for section in needs if not attrs.get(section)}
        if command in ('check-jacobi', 'realize', 'dual-pair', 'normal-form') \
                and attrs.get('samples', {}).get('count', 0) == 0:
            errors['samples'] = 'count must be positive for this command.'
        return errors


def validate_config(data, command=None):
    """
    Validate a decoded configuration and return it as plain JSON data.

    Raises:
        ConfigError: With the serializer's field-keyed errors.
    """
    if command is not None and command not in COMMANDS:
        raise ConfigError(f'Unknown command {command!r}', errors={'command': COMMANDS})
    serializer = RunConfigSerializer(data=data, context={'command': command})
    if not serializer.is_valid():
        raise ConfigError(f'Invalid configuration: {json.dumps(serializer.errors)}', errors=serializer.errors)
    return json.loads(json.dumps(serializer.validated_data))


def read_config(path):
    """
    Decode a JSON configuration file without validating it.

    Raises:
        ConfigError: On a missing file or malformed JSON (with line and column).
    """
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as e:
        raise ConfigError(f'Cannot read configuration {str(path)!r}: {e}')
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(
            f'{path.name}: line {e.lineno}, column {e.colno}: {e.msg}',
            line=e.lineno, column=e.colno,
        )
    if not isinstance(data, dict):
        raise ConfigError(f'{path.name}: top level must be a JSON object')
    return data


def load_config(path, command=None):
    """Read and validate a JSON run configuration"""
    return validate_config(read_config(path), command)


class CheckRecordSerializer(StrictSerializer):
    """Serializer for one report record"""
    name = serializers.CharField()
    residual = serializers.FloatField(allow_null=True)
    tolerance = serializers.FloatField()
    passed = serializers.BooleanField()
    probed_radius = serializers.FloatField(allow_null=True, required=False)
    detail = serializers.CharField(allow_blank=True)
    kind = serializers.ChoiceField(choices=['check', 'refinement'])
    extra = serializers.DictField(required=False)


class ReportSerializer(StrictSerializer):
    """Serializer for a JSON report as written by the pnf command"""
    command = serializers.ChoiceField(choices=COMMANDS)
    config = serializers.CharField()
    config_digest = serializers.RegexField(r'^[0-9a-f]{64}$')
    version = serializers.CharField()
    passed = serializers.BooleanField()
    records = CheckRecordSerializer(many=True)
    summary = serializers.DictField()
    timing = serializers.DictField(required=False)

    def validate(self, attrs):
        """The overall verdict is the conjunction of the records"""
        expected = bool(attrs['records']) and all(record['passed'] for record in attrs['records'])
        if attrs['passed'] != expected:
            raise serializers.ValidationError({'passed': 'Does not match the record verdicts.'})
        return attrs
