"""
URL configuration for cnlNet.

Only the admin is routed; it lists the runs stored by ``run --record``.
"""
from django.contrib import admin
from django.urls import path

urlpatterns = [
    path('admin/', admin.site.urls),
]

admin.site.site_header = "CNL Experiment Admin"
admin.site.site_title = "CNL Admin Portal"
admin.site.index_title = "Recorded experiment runs"
