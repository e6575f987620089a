# Generated by Django 5.2 on 2026-10-17 15:40

from django.db import migrations, models


class Migration(migrations.Migration):

    dependencies = [
        ('core', '0001_initial'),
    ]

    operations = [
        migrations.AlterField(
            model_name='experimentrun',
            name='exchange',
            field=models.CharField(choices=[('plaintext', 'Plaintext'), ('encrypted', 'Encrypted')], default='encrypted', max_length=20),
        ),
    ]
