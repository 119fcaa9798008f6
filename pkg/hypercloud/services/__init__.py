# Services: data formats, band selection, models, training, inference, evaluation, registry, charts
